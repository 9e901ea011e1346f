"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, precision


def numerical_grad(fn: Callable[[Sequence[np.ndarray]], float], arrays: Sequence[np.ndarray], index: int, eps: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function w.r.t. ``arrays[index]``."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    target = arrays[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn(arrays)
        flat[i] = orig - eps
        down = fn(arrays)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def gradient_errors(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], eps: float = 1e-6, wrt: Sequence[int] | None = None) -> tuple[float, float]:
    """Compare backward against finite differences in 64-bit mode.

    ``fn`` maps input tensors to an output tensor; the output is contracted
    with a fixed random weighting so every element contributes. Returns
    ``(normwise, elementwise)``: the worst ``|a - n| / max(|a|, |n|)`` over
    whole gradient vectors, and the worst per-entry
    ``|a_i - n_i| / max(|a_i|, |n_i|, 1)``.
    """
    wrt = range(len(arrays)) if wrt is None else wrt
    with precision(np.float64):
        ts = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*ts)
        rng = np.random.default_rng(1234)
        weights = rng.standard_normal(out.shape)
        out.backward(weights)
        analytic = [t.grad if t.grad is not None else np.zeros(t.shape) for t in ts]

        def scalar(arrs):
            return float(np.sum(fn(*[Tensor(a) for a in arrs]).data * weights))

        normwise = elementwise = 0.0
        for i in wrt:
            num = numerical_grad(scalar, arrays, i, eps)
            a = analytic[i]
            denom = max(np.linalg.norm(num), np.linalg.norm(a), 1e-8)
            normwise = max(normwise, float(np.linalg.norm(num - a) / denom))
            scale = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1.0)
            elementwise = max(elementwise, float(np.max(np.abs(num - a) / scale, initial=0.0)))
    return normwise, elementwise


def check_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], eps: float = 1e-6, wrt: Sequence[int] | None = None) -> float:
    """Worst norm-wise relative error of backward against finite differences."""
    return gradient_errors(fn, arrays, eps, wrt)[0]
