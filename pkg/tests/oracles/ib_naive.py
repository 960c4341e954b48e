"""Plain probability-domain IB iteration, written independently of ibkit.ib."""
import numpy as np
from scipy.special import rel_entr


def _mi_bits(j):
    px = j.sum(1, keepdims=True)
    py = j.sum(0, keepdims=True)
    return rel_entr(j, px * py).sum() / np.log(2)


def run(pxy, beta, nt, seed, iters=5000, tol=1e-12):
    rng = np.random.default_rng(seed)
    nx, ny = pxy.shape
    px = pxy.sum(1)
    pyx = pxy / px[:, None]
    q = rng.random((nx, nt))
    q /= q.sum(1, keepdims=True)
    f_old = np.inf
    for _ in range(iters):
        pt = q.T @ px
        pxt = (q * px[:, None]) / pt[None, :]
        pyt = pxt.T @ pyx
        f = _mi_bits(q * px[:, None]) - beta * _mi_bits(pt[:, None] * pyt)
        if abs(f_old - f) < tol:
            break
        f_old = f
        d = rel_entr(pyx[:, None, :], pyt[None, :, :]).sum(-1)
        w = pt[None, :] * np.exp(-beta * (d - d.min(1, keepdims=True)))
        q = w / w.sum(1, keepdims=True)
    return f
