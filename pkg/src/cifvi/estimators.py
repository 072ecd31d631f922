"""Evaluation-time Monte Carlo estimators.

All estimators run tape-free and draw from independent child streams of the
rng they are handed, one stream per chunk, so results do not depend on the
chunk-to-thread assignment (``CIFVI_THREADS``).
"""
from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from cifvi import kernels
from cifvi.cif import CifStack, FlowPosterior, NonFiniteError

OUTER_CHUNK = 20_000
INNER_ROWS = 50_000


@dataclass
class EstimatorReport:
    value: float
    std_error: float
    n_outer: int
    n_inner: int
    wall_time: float
    aux_value: float | None = None
    aux_std_error: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def worker_threads() -> int:
    return max(1, int(os.environ.get("CIFVI_THREADS", "1")))


def _map(fn: Callable, items: Sequence) -> list:
    threads = worker_threads()
    if threads == 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    n = len(values)
    se = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return float(values.mean()), se


def split_streams(rng: np.random.Generator) -> tuple[np.random.Generator, np.random.Generator]:
    """Outer (path) and inner (auxiliary) streams derived from one generator."""
    outer, inner = rng.spawn(2)
    return outer, inner


def _chunks(n: int, size: int) -> list[tuple[int, int]]:
    return [(lo, min(n, lo + size)) for lo in range(0, n, size)]


def logmeanexp_rows(a: np.ndarray) -> np.ndarray:
    return kernels.logsumexp_rows(np.ascontiguousarray(a)) - math.log(a.shape[1])


def _tile_x(x, n: int):
    if x is None:
        return None
    x = np.asarray(x, dtype=np.float64)
    return np.broadcast_to(x, (n, x.shape[-1])).copy() if x.ndim == 1 else x


# -- q_Z(z) by importance sampling --------------------------------------------


def log_qz_importance(model, z: np.ndarray, M: int, rng: np.random.Generator,
                      x=None) -> np.ndarray:
    """log of (1/M) sum_j q(z, u_j) / r(u_j | z), u_j ~ r(. | z), per row of z.

    Explicit flows return their exact log density.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    n = len(z)
    x = _tile_x(x, n)
    if isinstance(model, FlowPosterior):
        return model.log_prob(z, x).data
    rows = max(1, INNER_ROWS // M)
    spans = _chunks(n, rows)
    streams = rng.spawn(len(spans))

    def run(k):
        lo, hi = spans[k]
        zc = np.repeat(z[lo:hi], M, axis=0)
        xc = None if x is None else np.repeat(x[lo:hi], M, axis=0)
        joint, r, _ = model.reverse_sweep(zc, xc, rng=streams[k])
        logw = (joint.data - r.data).reshape(hi - lo, M)
        if not np.all(np.isfinite(logw)):
            bad = ~np.all(np.isfinite(logw), axis=1)
            raise NonFiniteError("non-finite importance weight", z[lo:hi][bad])
        return logmeanexp_rows(logw)

    return np.concatenate(_map(run, range(len(spans))))


def qz_importance_estimate(model, z, M: int, rng: np.random.Generator, x=None):
    """Unbiased importance-sampling estimate of the marginal density q_Z(z)."""
    out = np.exp(log_qz_importance(model, z, M, rng, x))
    return float(out[0]) if np.ndim(z) == 1 else out


# -- outer draws shared by ELBO-type reports ----------------------------------


def draw_elbo_terms(model, target, n: int, rng: np.random.Generator, x=None):
    """Draw ``n`` samples; return (z, auxiliary ELBO integrands, log p(x, z))."""
    x = _tile_x(x, n)
    spans = _chunks(n, OUTER_CHUNK)
    streams = rng.spawn(len(spans))

    def run(k):
        lo, hi = spans[k]
        xc = None if x is None else x[lo:hi]
        if isinstance(model, CifStack):
            path = model.sample_path(streams[k], None if model.amortized else hi - lo, xc)
            z = path.z
            aux = model.elbo(target, xc, path=path)
        else:
            z, log_q = model.sample_with_log_prob(streams[k], hi - lo, xc)
            aux = target.log_joint(xc, z) - log_q
        return z.data, aux.data, target.log_joint(xc, z).data

    parts = _map(run, range(len(spans)))
    return tuple(np.concatenate(p) for p in zip(*parts))


def elbo_report(model, target, n: int, rng: np.random.Generator, x=None) -> EstimatorReport:
    """Mean and standard error of ``n`` single-sample ELBO estimates."""
    t0 = time.perf_counter()
    outer, _ = split_streams(rng)
    _, aux, _ = draw_elbo_terms(model, target, n, outer, x)
    value, se = _mean_se(aux)
    return EstimatorReport(value, se, n, 1, time.perf_counter() - t0)


def marginal_elbo_estimate(model, target, N: int = 10_000, M: int = 100,
                           rng: np.random.Generator | None = None, x=None) -> EstimatorReport:
    """Nested estimate of E_q[log p(x, z) - log q_Z(z)].

    q_Z is replaced by its M-sample importance estimate, which biases the
    result upwards; the bias vanishes as M grows.  The auxiliary ELBO of the
    same outer draws is reported alongside.
    """
    if N < 1 or M < 1:
        raise ValueError("N and M must be >= 1")
    t0 = time.perf_counter()
    outer, inner = split_streams(rng)
    z, aux, log_p = draw_elbo_terms(model, target, N, outer, x)
    log_q = log_qz_importance(model, z, M, inner, x)
    value, se = _mean_se(log_p - log_q)
    aux_value, aux_se = _mean_se(aux)
    return EstimatorReport(value, se, N, M, time.perf_counter() - t0, aux_value, aux_se)


# -- importance-sampled log-likelihood ----------------------------------------


def is_log_likelihood(model, target, data: np.ndarray, S: int = 1000,
                      rng: np.random.Generator | None = None, per_datum: bool = False):
    """Average over data of log (1/S) sum_s p(x, z_s) r(u_s | z_s, x) / q(z_s, u_s | x).

    For explicit posteriors the ratio is p / q.  The importance weights are
    exactly the single-path ELBO integrands, so S = 1 reproduces the ELBO.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if len(data) == 0:
        raise ValueError("empty dataset")
    if S < 1:
        raise ValueError("S must be >= 1")
    t0 = time.perf_counter()
    per = max(1, INNER_ROWS // S)
    spans = _chunks(len(data), per)
    streams = rng.spawn(len(spans))

    def run(k):
        lo, hi = spans[k]
        xc = np.repeat(data[lo:hi], S, axis=0)
        logw = model.elbo(target, xc, rng=streams[k]).data.reshape(hi - lo, S)
        return logmeanexp_rows(logw)

    values = np.concatenate(_map(run, range(len(spans))))
    if per_datum:
        return values
    value, se = _mean_se(values)
    return EstimatorReport(value, se, len(data), S, time.perf_counter() - t0)
