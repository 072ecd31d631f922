import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from cifvi import kernels


def test_active_implementation_follows_flag():
    expected = kernels.logsumexp_rows_numba if kernels.USE_NUMBA else kernels.logsumexp_rows_numpy
    assert kernels.logsumexp_rows is expected


def test_logsumexp_paths_agree_with_scipy(rng):
    a = rng.uniform(-700, 700, size=(50, 30))
    a[3] = -np.inf
    a[4, :5] = -np.inf
    ref = logsumexp(a, axis=1)
    for fn in (kernels.logsumexp_rows_numpy, kernels.logsumexp_rows_numba):
        with np.errstate(divide="ignore"):
            out = fn(a)
        assert np.isneginf(out[3])
        mask = np.isfinite(ref)
        assert np.allclose(out[mask], ref[mask], rtol=1e-14, atol=1e-12)


def test_mog_paths_agree_with_direct_sum(rng):
    means = rng.uniform(-3, 3, size=(7, 2))
    z = rng.uniform(-6, 6, size=(200, 2))
    var = 0.3
    dens = np.mean([multivariate_normal(m, var * np.eye(2)).pdf(z) for m in means], axis=0)
    for fn in (kernels.mog_logpdf_numpy, kernels.mog_logpdf_numba):
        logp, resp = fn(z, means, var)
        assert np.allclose(logp, np.log(dens), rtol=1e-12)
        assert np.allclose(resp.sum(axis=1), 1.0)
    lp1, r1 = kernels.mog_logpdf_numpy(z, means, var)
    lp2, r2 = kernels.mog_logpdf_numba(z, means, var)
    assert np.allclose(lp1, lp2, rtol=1e-13) and np.allclose(r1, r2, atol=1e-13)


@pytest.mark.parametrize("n", [1, 5, 3000])
def test_kde_paths_agree(rng, n):
    s = rng.standard_normal((n, 2))
    xs, ys = np.linspace(-3, 3, 17), np.linspace(-2, 2, 11)
    a = kernels.kde_grid_numpy(s, xs, ys, 0.4, 0.3)
    b = kernels.kde_grid_numba(s, xs, ys, 0.4, 0.3)
    assert a.shape == (17, 11)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-300)
