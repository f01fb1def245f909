"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward


# Gradients whose norm is below this are treated as exactly zero: central
# differences at h=1e-4 carry ~1e-12 of rounding noise, which would
# otherwise give a relative error near 1 for a vanishing true gradient.
ZERO_FLOOR = 1e-7


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ZERO_FLOOR) -> float:
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(num / den)


def numerical_gradient(fn: Callable[[dict], float], arrays: dict, name: str, h: float = 1e-4,
                       index=None) -> np.ndarray:
    """d fn / d arrays[name] by central differences (optionally at a subset of entries)."""
    x = arrays[name]
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    entries = range(flat.size) if index is None else index
    for i in entries:
        old = flat[i]
        flat[i] = old + h
        fp = fn(arrays)
        flat[i] = old - h
        fm = fn(arrays)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def check_gradients(build: Callable[[dict], Tensor], arrays: dict, h: float = 1e-4,
                    max_entries: int | None = None, seed: int = 0) -> dict:
    """Compare reverse-mode and finite-difference gradients for a scalar graph.

    ``build`` maps a dict of Tensors (same keys as ``arrays``) to a scalar
    Tensor. Every array is treated as a differentiable leaf. Returns the
    relative error per input name. With ``max_entries`` only a seeded random
    subset of each array's entries is differenced.
    """
    arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    backward(build(leaves))

    def scalar(arrs):
        return float(build({k: Tensor(v) for k, v in arrs.items()}).data)

    rng = np.random.default_rng(seed)
    errors = {}
    for name, leaf in leaves.items():
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[name])
        size = arrays[name].size
        index = None
        if max_entries is not None and size > max_entries:
            index = np.sort(rng.choice(size, max_entries, replace=False))
        numeric = numerical_gradient(scalar, arrays, name, h, index)
        if index is not None:
            analytic = analytic.reshape(-1)[index]
            numeric = numeric.reshape(-1)[index]
        errors[name] = relative_error(analytic, numeric)
    return errors
