"""Central finite differences, the oracle for every analytic gradient."""
from __future__ import annotations

from typing import Callable

import numpy as np


def finite_diff_check(fn: Callable[[np.ndarray], float], point, eps: float = 1e-6) -> np.ndarray:
    """Numerical gradient of scalar ``fn`` at ``point`` by central differences."""
    x = np.array(point, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(fn(x))
        flat[i] = orig - eps
        f_minus = float(fn(x))
        flat[i] = orig
        g[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a-b| / max(|a|, |b|, floor), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
