"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeats 5]

Each row reports the best-of-N wall time for both paths and checks that the
two agree.  The numba path is compiled (and cached) before timing.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from cifvi import kernels


def best_of(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    a = rng.normal(0, 30, size=(100_000, 100))
    yield "logsumexp_rows 1e5x100", kernels.logsumexp_rows_numpy, kernels.logsumexp_rows_numba, (a,)
    z = rng.normal(0, 2, size=(200_000, 2))
    means = np.array([(x, y) for x in (-3.0, -1.0, 1.0, 3.0) for y in (-3.0, -1.0, 1.0, 3.0)])
    yield "mog_logpdf 2e5 pts, K=16", kernels.mog_logpdf_numpy, kernels.mog_logpdf_numba, (z, means, 1 / 16)
    s = rng.normal(0, 1, size=(10_000, 2))
    xs = ys = np.linspace(-5, 5, 101)
    yield "kde_grid 1e4 pts, 101^2", kernels.kde_grid_numpy, kernels.kde_grid_numba, (s, xs, ys, 0.2, 0.2)


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if kernels.numba is None:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}  agree")
    for name, slow, fast, inputs in cases(rng):
        fast(*inputs)  # compile
        ref, got = slow(*inputs), fast(*inputs)
        ref = ref if isinstance(ref, tuple) else (ref,)
        got = got if isinstance(got, tuple) else (got,)
        agree = all(np.allclose(r, g, rtol=1e-10, atol=1e-12) for r, g in zip(ref, got))
        t_np = best_of(lambda: slow(*inputs), args.repeats)
        t_nb = best_of(lambda: fast(*inputs), args.repeats)
        print(f"{name:28s} {1e3 * t_np:10.2f} {1e3 * t_nb:10.2f} {t_np / t_nb:8.2f}  {agree}")


if __name__ == "__main__":
    main()
