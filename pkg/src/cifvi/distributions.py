"""Diagonal Gaussians, the small MLPs that parametrize them, and seeding."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from cifvi import autodiff as ad
from cifvi.autodiff import Module, Parameter, Tensor, as_tensor

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
LOG_STD_BOUNDS = (-7.0, 7.0)


def make_rng(seed) -> np.random.Generator:
    """Counter-based (Philox) generator; ``seed`` may be an int or SeedSequence."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


def spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    return list(rng.spawn(n))


class Mlp(Module):
    """Fully connected net, tanh on hidden layers, identity output.

    ``masks`` (one per layer, shaped like the weights) turn it into a MADE
    conditioner.  With ``heads=2`` the output is split in half.
    """

    def __init__(self, widths: Sequence[int], rng: np.random.Generator, heads: int = 1,
                 zero_final: bool = False, masks: Sequence[np.ndarray] | None = None):
        widths = list(widths)
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        if heads not in (1, 2) or widths[-1] % heads:
            raise ValueError(f"output width {widths[-1]} cannot be split into {heads} heads")
        self.widths = widths
        self.heads = heads
        self.masks = None if masks is None else [np.asarray(m, dtype=np.float64) for m in masks]
        self.weights: list[Parameter] = []
        self.biases: list[Parameter] = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = 1.0 / math.sqrt(fan_in)
            if zero_final and i == len(widths) - 2:
                w, b = np.zeros((fan_in, fan_out)), np.zeros(fan_out)
            else:
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
                b = rng.uniform(-bound, bound, size=fan_out)
            self.weights.append(Parameter(w))
            self.biases.append(Parameter(b))

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def __call__(self, x):
        h = as_tensor(x)
        if h.shape[-1] != self.in_dim:
            raise ad.ShapeError(f"expected input width {self.in_dim}, got {h.shape[-1]}")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if self.masks is not None:
                w = w * self.masks[i]
            h = h @ w + b
            if i < last:
                h = h.tanh()
        if self.heads == 1:
            return h
        k = self.out_dim // 2
        return h[..., :k], h[..., k:]


@dataclass
class DiagonalGaussian:
    """N(mean, diag(exp(log_std)^2)); mean may carry a leading batch axis."""

    mean: Tensor
    log_std: Tensor

    def __post_init__(self):
        self.mean = as_tensor(self.mean)
        self.log_std = as_tensor(self.log_std)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def log_prob(self, z) -> Tensor:
        z = as_tensor(z)
        if z.shape[-1] != self.dim:
            raise ad.ShapeError(f"point has dimension {z.shape[-1]}, distribution {self.dim}")
        scaled = (z - self.mean) * ad.exp(-self.log_std)
        return ad.sum(-HALF_LOG_2PI - self.log_std - 0.5 * ad.square(scaled), axis=-1)

    def rsample(self, rng: np.random.Generator | None = None, n: int | None = None,
                eps: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
        """Reparametrized draw ``mean + std * eps``; returns the noise too."""
        if eps is None:
            shape = self.mean.shape if n is None else (n,) + self.mean.shape[-1:]
            eps = rng.standard_normal(shape)
        return self.mean + ad.exp(self.log_std) * eps, eps


class ConditionalGaussianNet(Module):
    """Two-headed MLP from a condition vector to a DiagonalGaussian."""

    def __init__(self, in_dim: int, out_dim: int, hidden: Sequence[int],
                 rng: np.random.Generator, zero_final: bool = False):
        self.out_dim = out_dim
        self.net = Mlp([in_dim, *hidden, 2 * out_dim], rng, heads=2, zero_final=zero_final)

    @property
    def in_dim(self) -> int:
        return self.net.in_dim

    def __call__(self, c) -> DiagonalGaussian:
        mean, raw = self.net(c)
        return DiagonalGaussian(mean, ad.clamp(raw, *LOG_STD_BOUNDS))


def log_prob(dist: DiagonalGaussian, z) -> Tensor:
    return dist.log_prob(z)


def rsample(dist: DiagonalGaussian, rng: np.random.Generator, n: int | None = None):
    return dist.rsample(rng, n)


def condition(net: ConditionalGaussianNet, c) -> DiagonalGaussian:
    return net(c)
