"""Shared oracles for the test-suite."""
import numpy as np

from cifvi import autodiff as ad


def rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


def param_fd_check(fn, params, eps=1e-6):
    """Worst relative error between tape gradients of the scalar ``fn()`` and
    central differences, over every parameter in ``params``."""
    with ad.Tape() as tape:
        out = fn()
    grads = tape.gradient(out, params)
    worst = 0.0
    for p, g in zip(params, grads):
        def f(v, p=p):
            old = p.data
            p.data = v.reshape(old.shape)
            try:
                return fn().item()
            finally:
                p.data = old
        fd = ad.finite_diff_grad(f, p.data.copy(), eps)
        worst = max(worst, rel_err(g, fd))
    return worst


def fd_jacobian(f, x, eps=1e-6):
    """Central-difference Jacobian of a vector function at a 1-d point."""
    x = np.asarray(x, float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        cols.append((f(x + e) - f(x - e)) / (2 * eps))
    return np.stack(cols, axis=1)


def randomize(module, rng, scale=0.3):
    for p in module.parameters():
        p.data = p.data + scale * rng.standard_normal(p.data.shape)


def tractable_cif(seed=0, scale=0.4):
    """One-layer CIF on R with a 1-d index, small enough for quadrature."""
    from cifvi.bijections import ElementwiseAffine
    from cifvi.cif import CifLayer, CifStack, GaussianBase
    from cifvi.distributions import make_rng

    rng = make_rng(seed)
    base = GaussianBase(1, log_std=np.log(0.8), mean=0.1)
    layer = CifLayer(ElementwiseAffine(1, 0.2, -0.1), 1, rng, hidden=(6, 6))
    for net in (layer.st_net, layer.q_u_net):
        randomize(net, rng, scale)
    # a broad, input-free r keeps the importance weights light-tailed
    layer.r_u_net.net.biases[-1].data = np.array([0.0, np.log(4.0)])
    return CifStack(base, [layer])


def trapezoid_grid(lo=-16.0, hi=16.0, n=1601):
    t = np.linspace(lo, hi, n)
    w = np.full(n, t[1] - t[0])
    w[[0, -1]] *= 0.5
    return t, w


def quadrature_log_qz(stack, z_points, n=1601):
    """log q_Z(z) by trapezoid integration of the joint over the index."""
    u, wts = trapezoid_grid(n=n)
    z = np.asarray(z_points, float).reshape(-1)
    zz = np.repeat(z, len(u))[:, None]
    uu = np.tile(u, len(z))[:, None]
    from cifvi.cif import joint_log_prob
    joint = joint_log_prob(stack, zz, [uu]).data.reshape(len(z), len(u))
    return np.log(np.exp(joint) @ wts)
