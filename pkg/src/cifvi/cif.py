"""Continuously-indexed flows as auxiliary variational posteriors.

A stack draws ``w0`` from a base Gaussian (optionally conditioned on data),
then for each layer draws an index ``u ~ q(u | w_prev)`` and pushes
``w = exp(s(u)) * (g(w_prev) + t(u))``.  The auxiliary model ``r`` walks the
same layers backwards from ``z``, inverting each indexed map with the drawn
index, which is what lets one backward sweep produce both the joint density
and the auxiliary density.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from cifvi import autodiff as ad
from cifvi.autodiff import Module, Parameter, Tensor, as_tensor
from cifvi.bijections import Bijection
from cifvi.distributions import LOG_STD_BOUNDS, ConditionalGaussianNet, DiagonalGaussian, Mlp


class NonFiniteError(FloatingPointError):
    """An estimator produced a non-finite value; ``z`` holds the offending points."""

    def __init__(self, message: str, z: np.ndarray):
        super().__init__(message)
        self.z = z


# -- base distributions -------------------------------------------------------


class GaussianBase(Module):
    """q(w0) = N(mean, std^2 I), the std optionally learned.

    With ``isotropic`` a single log-std is shared by all coordinates.
    """

    amortized = False

    def __init__(self, dim: int, log_std: float = 0.0, mean=0.0, trainable_std: bool = False,
                 trainable_mean: bool = False, isotropic: bool = True):
        self.dim = dim
        self.mean = Parameter(np.broadcast_to(np.asarray(mean, float), (dim,)).copy(),
                              trainable=trainable_mean)
        size = 1 if isotropic else dim
        self.log_std = Parameter(np.full(size, float(log_std)), trainable=trainable_std)

    def distribution(self, x=None) -> DiagonalGaussian:
        log_std = self.log_std if self.log_std.shape == (self.dim,) else ad.broadcast(self.log_std, (self.dim,))
        return DiagonalGaussian(self.mean, log_std)

    def features(self, x):
        return None


class AmortizedEncoder(Module):
    """q(w0 | x) from a two-headed MLP, plus a shared feature net for r."""

    amortized = True

    def __init__(self, x_dim: int, dim: int, hidden: Sequence[int], rng: np.random.Generator,
                 feature_dim: int = 0, feature_hidden: Sequence[int] = ()):
        self.dim = dim
        self.x_dim = x_dim
        self.feature_dim = feature_dim
        self.net = Mlp([x_dim, *hidden, 2 * dim], rng, heads=2)
        self.feature_net = Mlp([x_dim, *feature_hidden, feature_dim], rng) if feature_dim else None

    def _x(self, x):
        if x is None:
            raise ValueError("an amortized posterior needs data x")
        x = as_tensor(x)
        if x.shape[-1] != self.x_dim:
            raise ad.ShapeError(f"expected data width {self.x_dim}, got {x.shape[-1]}")
        return x

    def distribution(self, x) -> DiagonalGaussian:
        mean, raw = self.net(self._x(x))
        return DiagonalGaussian(mean, ad.clamp(raw, *LOG_STD_BOUNDS))

    def features(self, x):
        if self.feature_net is None:
            return None
        return self.feature_net(self._x(x))


# -- one layer ----------------------------------------------------------------


class CifLayer(Module):
    """Indexed bijection exp(s(u)) * (g(w) + t(u)) with its q and r index models."""

    def __init__(self, g: Bijection, u_dim: int, rng: np.random.Generator,
                 hidden: Sequence[int] = (10, 10), r_extra_dim: int = 0, share_qr: bool = False):
        d = g.dim
        self.g = g
        self.u_dim = u_dim
        self.st_net = Mlp([u_dim, *hidden, 2 * d], rng, heads=2, zero_final=True)
        self.q_u_net = ConditionalGaussianNet(d, u_dim, hidden, rng)
        if share_qr:
            if r_extra_dim:
                raise ValueError("q and r can only be shared without extra r inputs")
            self.r_u_net = self.q_u_net
        else:
            self.r_u_net = ConditionalGaussianNet(d + r_extra_dim, u_dim, hidden, rng, zero_final=True)

    @property
    def dim(self) -> int:
        return self.g.dim

    def _check_u(self, u: Tensor) -> Tensor:
        u = as_tensor(u)
        if u.shape[-1] != self.u_dim:
            raise ad.ShapeError(f"index has dimension {u.shape[-1]}, layer expects {self.u_dim}")
        return u

    def index_transform(self, w, u) -> tuple[Tensor, Tensor]:
        s, t = self.st_net(self._check_u(u))
        gw, logdet = self.g.forward(w)
        return ad.exp(s) * (gw + t), logdet + ad.sum(s, axis=-1)

    def index_inverse(self, z, u) -> tuple[Tensor, Tensor]:
        s, t = self.st_net(self._check_u(u))
        w, logdet = self.g.inverse(as_tensor(z) * ad.exp(-s) - t)
        return w, logdet - ad.sum(s, axis=-1)

    def q_u(self, w) -> DiagonalGaussian:
        return self.q_u_net(w)

    def r_u(self, w, features=None) -> DiagonalGaussian:
        if features is not None and self.r_u_net is not self.q_u_net:
            w = ad.concat([w, features], axis=-1)
        return self.r_u_net(w)


def index_transform(layer: CifLayer, w, u):
    return layer.index_transform(w, u)


def index_inverse(layer: CifLayer, z, u):
    return layer.index_inverse(z, u)


# -- stacks -------------------------------------------------------------------


@dataclass
class Noise:
    """Standard-normal draws behind one batch of sample paths."""

    eps_w: np.ndarray
    eps_u: list[np.ndarray] = field(default_factory=list)


@dataclass
class SamplePath:
    w0: Tensor
    us: list[Tensor]
    ws: list[Tensor]
    noise: Noise
    log_q0: Tensor
    log_qu: list[Tensor]
    logdets: list[Tensor]

    @property
    def z(self) -> Tensor:
        return self.ws[-1] if self.ws else self.w0


class CifStack(Module):
    """L indexed layers on top of a base; L = 0 is a plain Gaussian posterior."""

    def __init__(self, base: GaussianBase | AmortizedEncoder, layers: Sequence[CifLayer]):
        self.base = base
        self.layers = list(layers)
        for layer in self.layers:
            if layer.dim != base.dim:
                raise ad.ShapeError(f"layer dimension {layer.dim} != base dimension {base.dim}")

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def amortized(self) -> bool:
        return self.base.amortized

    def _check_x(self, x, n):
        if self.amortized:
            if x is None:
                raise ValueError("amortized stack needs x")
            x = as_tensor(x)
            if n is not None and n != x.shape[0]:
                raise ValueError("amortized stacks draw exactly one path per row of x")
            return x, x.shape[0]
        if x is not None:
            raise ValueError("x given to an un-amortized stack")
        return None, n

    def draw_noise(self, rng: np.random.Generator, n: int) -> Noise:
        eps_w = rng.standard_normal((n, self.dim))
        return Noise(eps_w, [rng.standard_normal((n, layer.u_dim)) for layer in self.layers])

    def sample_path(self, rng: np.random.Generator | None = None, n: int | None = None,
                    x=None, noise: Noise | None = None) -> SamplePath:
        x, n = self._check_x(x, n)
        if noise is None:
            if n is None:
                raise ValueError("need n (or x) to size the draw")
            noise = self.draw_noise(rng, n)
        q0 = self.base.distribution(x)
        w, _ = q0.rsample(eps=noise.eps_w)
        path = SamplePath(w0=w, us=[], ws=[], noise=noise, log_q0=q0.log_prob(w),
                          log_qu=[], logdets=[])
        for layer, eps in zip(self.layers, noise.eps_u):
            qu = layer.q_u(w)
            u, _ = qu.rsample(eps=eps)
            path.log_qu.append(qu.log_prob(u))
            w, logdet = layer.index_transform(w, u)
            path.us.append(u)
            path.ws.append(w)
            path.logdets.append(logdet)
        return path

    def sample(self, rng: np.random.Generator, n: int | None = None, x=None) -> np.ndarray:
        return self.sample_path(rng, n, x).z.data

    def elbo(self, target, x=None, rng=None, n=None, noise: Noise | None = None,
             path: SamplePath | None = None) -> Tensor:
        """Per-path auxiliary ELBO integrands, shape ``(n,)``."""
        if path is None:
            path = self.sample_path(rng, n, x, noise)
        features = self.base.features(x) if self.amortized else None
        delta = -path.log_q0
        w_prev = path.w0
        for layer, u, w, log_qu, logdet in zip(self.layers, path.us, path.ws, path.log_qu, path.logdets):
            delta = delta + layer.r_u(w, features).log_prob(u) - log_qu + logdet
            w_prev = w
        value = delta + target.log_joint(x, w_prev)
        if not np.all(np.isfinite(value.data)):
            bad = ~np.isfinite(value.data)
            raise NonFiniteError("non-finite ELBO integrand", path.z.data[bad])
        return value

    def reverse_sweep(self, z, x=None, us: Sequence | None = None,
                      rng: np.random.Generator | None = None):
        """Walk from z back to w0, drawing u from r when ``us`` is None.

        Returns ``(log q(z, u_1:L), log r(u_1:L | z), us)``.
        """
        w = as_tensor(z)
        features = self.base.features(x) if self.amortized else None
        n_lead = w.shape[:-1]
        joint = Tensor(np.zeros(n_lead))
        r_total = Tensor(np.zeros(n_lead))
        drawn = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            r = layer.r_u(w, features)
            if us is None:
                u, _ = r.rsample(eps=rng.standard_normal(w.shape[:-1] + (layer.u_dim,)))
            else:
                u = as_tensor(us[i])
            drawn[i] = u
            r_total = r_total + r.log_prob(u)
            w_prev, logdet_inv = layer.index_inverse(w, u)
            joint = joint + layer.q_u(w_prev).log_prob(u) + logdet_inv
            w = w_prev
        joint = joint + self.base.distribution(x).log_prob(w)
        return joint, r_total, drawn


def sample_path(stack: CifStack, rng, x=None, n=None) -> SamplePath:
    return stack.sample_path(rng, n, x)


def elbo_estimate(stack: CifStack, target, x=None, rng=None, n=None, noise=None) -> Tensor:
    return stack.elbo(target, x, rng, n, noise)


def joint_log_prob(stack: CifStack, z, u_list, x=None) -> Tensor:
    return stack.reverse_sweep(z, x, us=u_list)[0]


def r_log_prob(stack: CifStack, u_list, z, x=None) -> Tensor:
    return stack.reverse_sweep(z, x, us=u_list)[1]


def reconstruct_ws(stack: CifStack, z, u_list) -> list[Tensor]:
    """w_1..w_L recovered from (z, u_1:L) by inverting layers from the top."""
    ws = [as_tensor(z)]
    for layer, u in zip(reversed(stack.layers[1:]), reversed(list(u_list)[1:])):
        ws.append(layer.index_inverse(ws[-1], u)[0])
    return ws[::-1]


# -- explicit baseline flow ---------------------------------------------------


class FlowPosterior(Module):
    """Pushforward of the base through one bijection; density is exact."""

    def __init__(self, base: GaussianBase | AmortizedEncoder, g: Bijection):
        self.base = base
        self.g = g
        if g.dim != base.dim:
            raise ad.ShapeError("flow and base dimensions differ")

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def amortized(self) -> bool:
        return self.base.amortized

    def sample_with_log_prob(self, rng=None, n=None, x=None, eps=None):
        q0 = self.base.distribution(x)
        if self.amortized:
            n = as_tensor(x).shape[0]
        if eps is None:
            eps = rng.standard_normal((n, self.dim))
        w, _ = q0.rsample(eps=eps)
        z, logdet = self.g.forward(w)
        return z, q0.log_prob(w) - logdet

    def sample(self, rng, n=None, x=None) -> np.ndarray:
        return self.sample_with_log_prob(rng, n, x)[0].data

    def log_prob(self, z, x=None) -> Tensor:
        w, logdet_inv = self.g.inverse(z)
        return self.base.distribution(x).log_prob(w) + logdet_inv

    def elbo(self, target, x=None, rng=None, n=None, eps=None) -> Tensor:
        z, log_q = self.sample_with_log_prob(rng, n, x, eps)
        value = target.log_joint(x, z) - log_q
        if not np.all(np.isfinite(value.data)):
            raise NonFiniteError("non-finite ELBO integrand", z.data[~np.isfinite(value.data)])
        return value


def baseline_elbo_estimate(base, g: Bijection, target, x=None, rng=None, n=None, eps=None) -> Tensor:
    """Single-sample change-of-variables ELBO for the pushforward of ``base`` by ``g``."""
    return FlowPosterior(base, g).elbo(target, x, rng, n, eps)
