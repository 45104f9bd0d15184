"""Central finite differences, used as the independent oracle for autograd."""
from __future__ import annotations

from typing import Callable

import numpy as np
import torch
from torch import Tensor


def numerical_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-3) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place element by element.

    ``f`` takes no arguments and reads ``x`` through closure; it is evaluated
    without gradient recording. Returns a float64 array shaped like ``x``.
    """
    out = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(f())
            flat[i] = orig - h
            fm = float(f())
            flat[i] = orig
            out.reshape(-1)[i] = (fp - fm) / (2 * h)
    return out


def max_relative_error(analytic, numeric) -> float:
    """max_i |a_i - n_i| / max_i max(|a_i|, |n_i|): error relative to the gradient's scale."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(float(np.abs(n).max(initial=0.0)), float(np.abs(a).max(initial=0.0)))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def max_elementwise_relative_error(analytic, numeric, floor: float = 1e-3) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor * scale).

    Diagnostic only: entries far below the gradient's scale carry float32
    rounding that this ratio magnifies.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(float(np.abs(n).max(initial=0.0)), float(np.abs(a).max(initial=0.0)))
    if scale == 0.0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * scale)
    return float((np.abs(a - n) / denom).max())
