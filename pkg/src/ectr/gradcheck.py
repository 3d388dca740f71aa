"""
Central finite differences for checking analytic gradients.
"""

from typing import Callable

import numpy as np


def central_difference(func: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """
    Centered-difference gradient of ``func`` at ``x`` (any shape), one
    coordinate at a time with step ``h``.
    """
    x0 = np.array(x, dtype=float)
    grad = np.zeros_like(x0)
    flat = x0.reshape(-1)
    out = grad.reshape(-1)
    for j in range(flat.size):
        saved = flat[j]
        flat[j] = saved + h
        fplus = func(x0)
        flat[j] = saved - h
        fminus = func(x0)
        flat[j] = saved
        out[j] = (fplus - fminus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Norm-wise relative error; ``floor`` keeps near-zero gradients from dividing by noise."""
    a = np.ravel(np.asarray(analytic, dtype=float))
    n = np.ravel(np.asarray(numeric, dtype=float))
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


def flatten(tensors) -> np.ndarray:
    return np.concatenate([np.ravel(t) for t in tensors]) if tensors else np.zeros(0)


def unflatten(vector: np.ndarray, like) -> list:
    """Split ``vector`` back into arrays shaped like ``like``."""
    out, offset = [], 0
    for t in like:
        size = int(np.size(t))
        out.append(np.array(vector[offset:offset + size]).reshape(np.shape(t)))
        offset += size
    return out
