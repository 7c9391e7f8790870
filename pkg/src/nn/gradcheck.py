# src/nn/gradcheck.py

from typing import Callable

import numpy as np


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central differences (f(x + eps e_i) - f(x - eps e_i)) / 2 eps for every component."""
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    x0 = np.array(x, dtype=np.float64)
    flat = x0.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = f(x0)
        flat[i] = keep - eps
        lo = f(x0)
        flat[i] = keep
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad.reshape(x0.shape)


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    analytic_grad: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    eps: float = 1e-4,
) -> float:
    """Max over components of |numeric - analytic| / (|analytic| + 1e-8)."""
    x0 = np.array(x, dtype=np.float64)
    numeric = numerical_gradient(f, x0, eps)
    analytic = np.asarray(analytic_grad(x0), dtype=np.float64).reshape(numeric.shape)
    if numeric.size == 0:
        return 0.0
    return float(np.max(np.abs(numeric - analytic) / (np.abs(analytic) + 1e-8)))
