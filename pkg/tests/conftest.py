"""Shared helpers: an independent finite-difference oracle and tiny fixtures.

The FD helper here is deliberately separate from the package's own
gradient-checking module so the two implementations can disagree.
"""

import numpy as np


def fd_grad(f, x, eps=1e-6):
    """Central-difference gradient of scalar f at x (own copy, f64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        keep = x[idx]
        x[idx] = keep + eps
        hi = f(x)
        x[idx] = keep - eps
        lo = f(x)
        x[idx] = keep
        g[idx] = (hi - lo) / (2 * eps)
        it.iternext()
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / scale)
