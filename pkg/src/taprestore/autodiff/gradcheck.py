"""Central finite-difference checks for analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def finite_difference_grad(fn: Callable[[], Tensor], target: Tensor, eps: float = 1e-5,
                           indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``target.data``.

    ``fn`` is re-evaluated with ``target.data`` perturbed in place. When
    ``indices`` is given only those entries are probed; the rest stay zero.
    """
    grad = np.zeros_like(target.data)
    flat = target.data.reshape(-1)
    probe = range(flat.size) if indices is None else [np.ravel_multi_index(i, target.shape) for i in indices]
    for k in probe:
        orig = flat[k]
        flat[k] = orig + eps
        plus = float(fn().data.sum())
        flat[k] = orig - eps
        minus = float(fn().data.sum())
        flat[k] = orig
        grad.reshape(-1)[k] = (plus - minus) / (2.0 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
              floor: float = 1e-6) -> float:
    """Return the worst relative error between backprop and central differences.

    ``fn`` must rebuild the graph from ``inputs`` on every call and return a
    scalar tensor. Inputs must be leaves with ``requires_grad=True``.
    """
    for t in inputs:
        t.grad = None
    fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    worst = 0.0
    for t, a in zip(inputs, analytic):
        n = finite_difference_grad(fn, t, eps=eps)
        worst = max(worst, max_relative_error(a, n, floor=floor))
    return worst
