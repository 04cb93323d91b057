"""Central finite differences, used as the independent oracle for tape gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import Param


def finite_diff_grad(f: Callable[[], float], param: Param, h: float = 1e-4,
                     coords: np.ndarray | None = None) -> np.ndarray:
    """Estimate d f / d param at flat ``coords`` (all coordinates by default).

    ``f`` takes no arguments and reads ``param.value`` in place.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    flat = param.value.reshape(-1)
    if coords is None:
        coords = np.arange(flat.size)
    out = np.empty(len(coords))
    for j, c in enumerate(coords):
        old = flat[c]
        flat[c] = old + h
        up = f()
        flat[c] = old - h
        down = f()
        flat[c] = old
        out[j] = (up - down) / (2.0 * h)
    return out


def scalar_fd(f: Callable[[float], float], x: float, h: float = 1e-4) -> float:
    return (f(x + h) - f(x - h)) / (2.0 * h)


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))
