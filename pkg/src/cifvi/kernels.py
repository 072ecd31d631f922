"""Loop-heavy numeric kernels with numba and pure-numpy implementations.

The numba path is used when numba imports and ``CIFVI_NUMBA`` is not ``0``.
Both paths are always importable as ``*_numpy`` / ``*_numba`` so tests and
``benchmarks/bench_kernels.py`` can compare them directly.
"""
from __future__ import annotations

import math
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and os.environ.get("CIFVI_NUMBA", "1") != "0"


def _njit(fn):
    if numba is None:  # pragma: no cover
        return fn
    return numba.njit(cache=True, fastmath=False)(fn)


# -- log-sum-exp over rows ----------------------------------------------------


def logsumexp_rows_numpy(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1)
    safe = np.where(np.isfinite(m), m, 0.0)
    return safe + np.log(np.exp(a - safe[:, None]).sum(axis=1))


@_njit
def logsumexp_rows_numba(a):
    n, k = a.shape
    out = np.empty(n)
    for i in range(n):
        m = -np.inf
        for j in range(k):
            if a[i, j] > m:
                m = a[i, j]
        if not np.isfinite(m):
            m = 0.0
        s = 0.0
        for j in range(k):
            s += math.exp(a[i, j] - m)
        out[i] = m + math.log(s)
    return out


# -- isotropic Gaussian mixture with equal weights ----------------------------


def mog_logpdf_numpy(z: np.ndarray, means: np.ndarray, var: float):
    """Log density of an equal-weight isotropic mixture and responsibilities."""
    d = z.shape[1]
    sq = ((z[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    comp = -0.5 * sq / var - 0.5 * d * math.log(2.0 * math.pi * var) - math.log(len(means))
    lse = logsumexp_rows_numpy(comp)
    return lse, np.exp(comp - lse[:, None])


@_njit
def mog_logpdf_numba(z, means, var):
    n, d = z.shape
    k = means.shape[0]
    const = -0.5 * d * math.log(2.0 * math.pi * var) - math.log(k)
    logp = np.empty(n)
    resp = np.empty((n, k))
    for i in range(n):
        m = -np.inf
        for j in range(k):
            sq = 0.0
            for c in range(d):
                diff = z[i, c] - means[j, c]
                sq += diff * diff
            v = -0.5 * sq / var + const
            resp[i, j] = v
            if v > m:
                m = v
        s = 0.0
        for j in range(k):
            s += math.exp(resp[i, j] - m)
        lse = m + math.log(s)
        logp[i] = lse
        for j in range(k):
            resp[i, j] = math.exp(resp[i, j] - lse)
    return logp, resp


# -- 2-D Gaussian kernel density on a grid ------------------------------------


def kde_grid_numpy(samples: np.ndarray, xs: np.ndarray, ys: np.ndarray,
                   hx: float, hy: float, chunk: int = 2048) -> np.ndarray:
    out = np.zeros((len(xs), len(ys)))
    norm = 1.0 / (2.0 * math.pi * hx * hy * len(samples))
    for start in range(0, len(samples), chunk):
        s = samples[start:start + chunk]
        kx = np.exp(-0.5 * ((xs[None, :] - s[:, 0:1]) / hx) ** 2)
        ky = np.exp(-0.5 * ((ys[None, :] - s[:, 1:2]) / hy) ** 2)
        out += kx.T @ ky  # kernel is separable per axis
    return out * norm


@_njit
def kde_grid_numba(samples, xs, ys, hx, hy):
    n = samples.shape[0]
    gx, gy = xs.shape[0], ys.shape[0]
    out = np.zeros((gx, gy))
    kx = np.empty(gx)
    ky = np.empty(gy)
    for i in range(n):
        for a in range(gx):
            t = (xs[a] - samples[i, 0]) / hx
            kx[a] = math.exp(-0.5 * t * t)
        for b in range(gy):
            t = (ys[b] - samples[i, 1]) / hy
            ky[b] = math.exp(-0.5 * t * t)
        for a in range(gx):
            if kx[a] == 0.0:
                continue
            for b in range(gy):
                out[a, b] += kx[a] * ky[b]
    norm = 1.0 / (2.0 * math.pi * hx * hy * n)
    return out * norm


# The separable KDE is a single matmul per chunk, which BLAS does faster than
# the compiled loop (see benchmarks/bench_kernels.py), so it always uses numpy.
kde_grid = kde_grid_numpy
if USE_NUMBA:
    logsumexp_rows = logsumexp_rows_numba
    mog_logpdf = mog_logpdf_numba
else:
    logsumexp_rows = logsumexp_rows_numpy
    mog_logpdf = mog_logpdf_numpy
