"""Invertible maps on R^d with analytic log-determinants.

Every bijection maps a batch ``(B, d)`` (or a single ``(d,)`` vector) to a
pair ``(output, logdet)`` where ``logdet`` has the batch shape.  ``forward``
is the sampling direction (noise to latent) and is a single pass for the
autoregressive layers; ``inverse`` solves coordinate by coordinate.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from cifvi import autodiff as ad
from cifvi.autodiff import Module, Parameter, Tensor, as_tensor
from cifvi.distributions import Mlp

LOG_SCALE_BOUNDS = (-5.0, 5.0)


def _zero_logdet(x: Tensor) -> Tensor:
    return Tensor(np.zeros(x.shape[:-1]))


class Bijection(Module):
    dim: int

    def forward(self, w) -> tuple[Tensor, Tensor]:
        raise NotImplementedError

    def inverse(self, z) -> tuple[Tensor, Tensor]:
        raise NotImplementedError

    def _check(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.dim:
            raise ad.ShapeError(f"{type(self).__name__} expects dimension {self.dim}, got {x.shape[-1]}")
        return x


class Identity(Bijection):
    def __init__(self, dim: int):
        self.dim = dim

    def forward(self, w):
        w = self._check(w)
        return w, _zero_logdet(w)

    def inverse(self, z):
        z = self._check(z)
        return z, _zero_logdet(z)


class ElementwiseAffine(Bijection):
    """z = exp(log_scale) * w + shift."""

    def __init__(self, dim: int, log_scale=0.0, shift=0.0, trainable: bool = True):
        self.dim = dim
        self.log_scale = Parameter(np.broadcast_to(np.asarray(log_scale, float), (dim,)).copy(),
                                   trainable=trainable)
        self.shift = Parameter(np.broadcast_to(np.asarray(shift, float), (dim,)).copy(),
                               trainable=trainable)

    def forward(self, w):
        w = self._check(w)
        z = w * ad.exp(self.log_scale) + self.shift
        return z, ad.sum(self.log_scale) + _zero_logdet(w)

    def inverse(self, z):
        z = self._check(z)
        w = (z - self.shift) * ad.exp(-self.log_scale)
        return w, -ad.sum(self.log_scale) + _zero_logdet(z)


class ReversePermutation(Bijection):
    def __init__(self, dim: int):
        self.dim = dim

    def forward(self, w):
        w = self._check(w)
        return w[..., ::-1], _zero_logdet(w)

    inverse = forward


def made_masks(d: int, hidden: Sequence[int], ordering: Sequence[int] | None = None,
               heads: int = 2) -> list[np.ndarray]:
    """Autoregressive weight masks, one per layer, shaped ``(fan_in, fan_out)``.

    ``ordering[j]`` is the degree (1..d) of input coordinate ``j``.  Output
    head ``i`` may only see inputs of strictly smaller degree.  Hidden degrees
    cycle through 1..d-1.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    degrees_in = np.arange(1, d + 1) if ordering is None else np.asarray(ordering)
    if sorted(degrees_in.tolist()) != list(range(1, d + 1)):
        raise ValueError(f"ordering must be a permutation of 1..{d}")
    cycle = max(d - 1, 1)
    degrees = [degrees_in]
    for width in hidden:
        degrees.append(np.arange(width) % cycle + 1)
    masks = [(deg_out[None, :] >= deg_prev[:, None]).astype(np.float64)
             for deg_prev, deg_out in zip(degrees[:-1], degrees[1:])]
    deg_out = np.tile(degrees_in, heads)
    masks.append((deg_out[None, :] > degrees[-1][:, None]).astype(np.float64))
    return masks


class MaskedAffineAutoregressive(Bijection):
    """z_i = w_i * exp(a_i(w_<i)) + m_i(w_<i) with a MADE conditioner."""

    def __init__(self, dim: int, hidden: Sequence[int], rng: np.random.Generator,
                 ordering: Sequence[int] | None = None, zero_final: bool = False):
        self.dim = dim
        self.ordering = np.arange(1, dim + 1) if ordering is None else np.asarray(ordering)
        masks = made_masks(dim, hidden, self.ordering)
        self.net = Mlp([dim, *hidden, 2 * dim], rng, heads=2, zero_final=zero_final, masks=masks)

    def _shift_log_scale(self, w):
        shift, raw = self.net(w)
        return shift, ad.clamp(raw, *LOG_SCALE_BOUNDS)

    def forward(self, w):
        w = self._check(w)
        shift, log_scale = self._shift_log_scale(w)
        return w * ad.exp(log_scale) + shift, ad.sum(log_scale, axis=-1)

    def inverse(self, z):
        z = self._check(z)
        zd = z.data
        w = np.zeros_like(zd)
        # pass k fixes every coordinate of degree <= k
        for _ in range(self.dim):
            shift, log_scale = self._shift_log_scale(w)
            w = (zd - shift.data) * np.exp(-log_scale.data)
        return Tensor(w), Tensor(-log_scale.data.sum(axis=-1))


class BatchNormBijection(Bijection):
    """Per-coordinate standardization followed by a learned affine map.

    In training mode with at least ``min_batch`` rows the batch statistics
    are used and the running averages updated; otherwise the running values.
    """

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5, min_batch: int = 100):
        self.dim = dim
        self.momentum = momentum
        self.eps = eps
        self.min_batch = min_batch
        self.log_gain = Parameter(np.zeros(dim))
        self.bias = Parameter(np.zeros(dim))
        self.running_mean = Parameter(np.zeros(dim), trainable=False)
        self.running_var = Parameter(np.ones(dim), trainable=False)

    def _stats(self, w: Tensor):
        if self.training and w.ndim == 2 and w.shape[0] >= self.min_batch:
            mu = ad.mean(w, axis=0)
            var = ad.mean(ad.square(w - mu), axis=0)
            m = self.momentum
            n = w.shape[0]
            self.running_mean.data = (1 - m) * self.running_mean.data + m * mu.data
            self.running_var.data = (1 - m) * self.running_var.data + m * var.data * n / (n - 1)
            return mu, var
        return self.running_mean.data, self.running_var.data

    def forward(self, w):
        w = self._check(w)
        mu, var = self._stats(w)
        half_log_var = 0.5 * ad.log(var + self.eps)
        z = (w - mu) * ad.exp(self.log_gain - half_log_var) + self.bias
        return z, ad.sum(self.log_gain - half_log_var) + _zero_logdet(w)

    def inverse(self, z):
        z = self._check(z)
        half_log_var = 0.5 * np.log(self.running_var.data + self.eps)
        w = (z - self.bias) * ad.exp(half_log_var - self.log_gain) + self.running_mean.data
        return w, ad.sum(half_log_var - self.log_gain) + _zero_logdet(z)


class Compose(Bijection):
    """Apply members in order; an empty composition is the identity."""

    def __init__(self, bijections: Sequence[Bijection], dim: int | None = None):
        self.bijections = list(bijections)
        dims = {b.dim for b in self.bijections}
        if len(dims) > 1:
            raise ad.ShapeError(f"composed bijections disagree on dimension: {sorted(dims)}")
        if not self.bijections and dim is None:
            raise ValueError("an empty composition needs an explicit dim")
        self.dim = dims.pop() if dims else dim

    def forward(self, w):
        x = self._check(w)
        total = _zero_logdet(x)
        for b in self.bijections:
            x, ld = b.forward(x)
            total = total + ld
        return x, total

    def inverse(self, z):
        x = self._check(z)
        total = _zero_logdet(x)
        for b in reversed(self.bijections):
            x, ld = b.inverse(x)
            total = total + ld
        return x, total


def compose(bijections: Sequence[Bijection], dim: int | None = None) -> Compose:
    return Compose(bijections, dim)


def maf_flow(dim: int, layers: int, hidden: Sequence[int], rng: np.random.Generator,
             batch_norm: bool = False) -> list[Bijection]:
    """Per-step bijections of a MAF: autoregressive layer, optional batch norm,
    and an order reversal between consecutive steps."""
    steps = []
    for i in range(layers):
        parts: list[Bijection] = [MaskedAffineAutoregressive(dim, hidden, rng)]
        if batch_norm:
            parts.append(BatchNormBijection(dim))
        if i < layers - 1:
            parts.append(ReversePermutation(dim))
        steps.append(parts[0] if len(parts) == 1 else Compose(parts))
    return steps
