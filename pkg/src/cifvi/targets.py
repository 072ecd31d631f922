"""Unnormalized joint densities log p(x, z) that the posteriors are fit to."""
from __future__ import annotations

import itertools
import math
from typing import Protocol

import numpy as np

from cifvi import autodiff as ad
from cifvi import kernels
from cifvi.autodiff import Module, Tensor, as_tensor
from cifvi.distributions import HALF_LOG_2PI, Mlp


class Target(Protocol):
    def log_joint(self, x, z) -> Tensor: ...


def log_joint(target: Target, x, z) -> Tensor:
    return target.log_joint(x, z)


class GaussianTarget:
    """Normalized N(mean, diag(std^2)) posterior with no data dependence."""

    def __init__(self, mean, std):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        self.std = np.broadcast_to(np.asarray(std, dtype=np.float64), self.mean.shape).copy()

    def log_joint(self, x, z) -> Tensor:
        scaled = (as_tensor(z) - self.mean) * (1.0 / self.std)
        const = -HALF_LOG_2PI * len(self.mean) - np.log(self.std).sum()
        return ad.sum(-0.5 * ad.square(scaled), axis=-1) + const


class MixtureOfGaussiansTarget:
    """Equal-weight mixture of isotropic Gaussians sharing one variance.

    There is no data: ``x`` is accepted and ignored so the target slots into
    the same estimators as data-dependent models.
    """

    def __init__(self, means, var: float):
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        if len(self.means) < 1:
            raise ValueError("need at least one component")
        self.var = float(var)

    @property
    def K(self) -> int:
        return len(self.means)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def log_joint(self, x, z) -> Tensor:
        z = as_tensor(z)
        zd = z.data
        flat = np.ascontiguousarray(zd.reshape(-1, self.dim))
        logp, resp = kernels.mog_logpdf(flat, self.means, self.var)
        means, var = self.means, self.var

        def vjp(g):
            pull = (resp @ means - flat) / var  # d logp / dz
            return (np.reshape(g, (-1, 1)) * pull).reshape(zd.shape),

        return ad.record_op(logp.reshape(zd.shape[:-1]), (z,), vjp)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        k = rng.integers(self.K, size=n)
        return self.means[k] + math.sqrt(self.var) * rng.standard_normal((n, self.dim))


def mog_lattice(K: int) -> MixtureOfGaussiansTarget:
    """Square-lattice mixtures with component std 1/4."""
    if K == 9:
        axis = (-2.0, 0.0, 2.0)
    elif K == 16:
        axis = (-3.0, -1.0, 1.0, 3.0)
    else:
        raise ValueError(f"unsupported lattice size K={K}; use 9 or 16")
    means = np.array(list(itertools.product(axis, axis)))
    return MixtureOfGaussiansTarget(means, var=1.0 / 16.0)


class LatentBernoulliModel(Module):
    """z ~ N(0, I), x_j ~ Bernoulli(sigmoid(decoder(z)_j))."""

    def __init__(self, n_z: int, x_dim: int, hidden, rng: np.random.Generator):
        self.n_z = n_z
        self.x_dim = x_dim
        self.decoder = Mlp([n_z, *hidden, x_dim], rng)

    def log_joint(self, x, z) -> Tensor:
        if x is None:
            raise ValueError("the Bernoulli model needs data x")
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        z = as_tensor(z)
        logits = self.decoder(z)
        # x log sigmoid(l) + (1 - x) log(1 - sigmoid(l)) == x l - softplus(l)
        loglik = ad.sum(x * logits - ad.softplus(logits), axis=-1)
        prior = ad.sum(-0.5 * ad.square(z), axis=-1) - HALF_LOG_2PI * self.n_z
        return prior + loglik
