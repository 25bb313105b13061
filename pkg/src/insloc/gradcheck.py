"""Central finite-difference gradient checking.

Reference path for every hand-wired backward pass in the engine. Checks
run in float64 by default; the analytic gradient must match numerical
differences to a relative error threshold wherever the analytic value is
above a magnitude floor.
"""

from __future__ import annotations

import numpy as np


def numerical_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar-valued f at x, elementwise."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        g.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray,
                  floor: float = 1e-8) -> float:
    """Max relative error over entries where |analytic| exceeds the floor.

    Returns 0.0 if no entry clears the floor (nothing to compare against).
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.shape != n.shape:
        raise ValueError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    mask = np.abs(a) > floor
    if not mask.any():
        return 0.0
    denom = np.maximum(np.abs(a[mask]), np.abs(n[mask]))
    return float(np.max(np.abs(a[mask] - n[mask]) / denom))


def check_grad(f, x: np.ndarray, analytic: np.ndarray, h: float = 1e-6,
               floor: float = 1e-8) -> float:
    """Convenience: numerical_grad + max_rel_error in one call."""
    return max_rel_error(analytic, numerical_grad(f, x, h=h), floor=floor)


def norm_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Whole-vector relative error ||a-n|| / (||a|| + ||n||); the right
    metric for deep composite chains where individual entries may sit at
    the finite-difference noise floor."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.linalg.norm(a) + np.linalg.norm(n)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)
