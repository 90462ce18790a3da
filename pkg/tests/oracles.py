"""Independent numerical oracles used by the tests (no package code inside)."""

import numpy as np


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of a scalar function ``f`` at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def fit_exponent(sizes, gaps):
    """Least-squares slope of log(gap) against log(size)."""
    return float(np.polyfit(np.log(sizes), np.log(gaps), 1)[0])
