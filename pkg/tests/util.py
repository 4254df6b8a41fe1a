"""Shared numeric test helpers."""

import numpy as np

from hiddentransfer.tensor import Tensor


def fd_grad(f, params, h=1e-4, coords=None, rng=None):
    """Central finite-difference gradients of scalar f() w.r.t. each Tensor
    in `params` (dict name -> Tensor, float64). Checks every coordinate
    unless `coords` limits to that many random coordinates per tensor."""
    out = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        if coords is None or flat.size <= coords:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=coords, replace=False)
        g = {}
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = f()
            flat[i] = orig - h
            dn = f()
            flat[i] = orig
            g[int(i)] = (up - dn) / (2 * h)
        out[name] = g
    return out


def check_grads(analytic, numeric, rtol=1e-3):
    """Compare analytic grad Tensors against fd_grad output; returns worst
    relative error."""
    worst = 0.0
    for name, coords in numeric.items():
        a = analytic[name].grad.reshape(-1)
        for i, fd in coords.items():
            denom = max(abs(fd), abs(a[i]), 1e-8)
            worst = max(worst, abs(a[i] - fd) / denom)
    assert worst <= rtol, f"gradient mismatch: worst rel err {worst:.3e}"
    return worst


def as_param(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)
