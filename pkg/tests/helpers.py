"""Shared test oracles: finite differences over arbitrary parameter lists."""

import numpy as np


def finite_difference_grads(fn, params, h=1e-6):
    """Central finite-difference gradient of scalar ``fn()`` w.r.t. ``params``.

    ``params`` is a list of float64 arrays mutated in place; ``fn`` must read
    them live (closures over the same array objects).
    """
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn()
            flat[i] = orig - h
            down = fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def relative_gradient_error(analytic, numeric):
    """Scale-free error between two gradient lists (stacked-vector norm)."""
    a = np.concatenate([np.asarray(g).ravel() for g in analytic])
    n = np.concatenate([np.asarray(g).ravel() for g in numeric])
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)
