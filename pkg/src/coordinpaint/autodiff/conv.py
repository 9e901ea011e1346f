"""Convolution and 2x resampling with backward rules.

Two convolution paths share one contract: ``im2col`` gathers every window
into a matrix and runs one GEMM; ``direct`` loops over kernel taps and
accumulates one channel-mixing product per tap. They agree to rounding.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

CONV_METHODS = ("direct", "im2col")
_default_method = "im2col"


def set_conv_method(method: str) -> None:
    global _default_method
    if method not in CONV_METHODS:
        raise ValueError(f"unknown convolution method {method!r}")
    _default_method = method


def _out_extent(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check(x: Tensor, w: Tensor, b, stride: int, padding: int):
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and OIkk weight, got {x.shape} and {w.shape}")
    if w.shape[2] != w.shape[3]:
        raise ValueError(f"kernel must be square, got {w.shape[2]}x{w.shape[3]}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels but weight expects {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    k = w.shape[2]
    ho = _out_extent(x.shape[2], k, stride, padding)
    wo = _out_extent(x.shape[3], k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"input {x.shape[2:]} with padding {padding} is smaller than kernel {k}")
    return k, ho, wo


def _pad(a: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)))


def _forward_direct(xp, w, stride, ho, wo):
    n = xp.shape[0]
    o, c, k, _ = w.shape
    out = np.zeros((n, ho, wo, o), dtype=xp.dtype)
    # channels-last accumulation keeps each tap a single GEMM
    xl = xp.transpose(0, 2, 3, 1)
    for i in range(k):
        for j in range(k):
            patch = xl[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
            out += patch @ w[:, :, i, j].T
    return out.transpose(0, 3, 1, 2)


def _backward_direct(xp, w, g, stride, ho, wo, need_x, need_w):
    o, c, k, _ = w.shape
    gl = g.transpose(0, 2, 3, 1)  # N,Ho,Wo,O
    xl = xp.transpose(0, 2, 3, 1)
    gxp = np.zeros(xl.shape, dtype=xp.dtype) if need_x else None
    gw = np.zeros(w.shape, dtype=xp.dtype) if need_w else None
    g2 = gl.reshape(-1, o)
    for i in range(k):
        for j in range(k):
            sl = (slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
            if need_w:
                patch = xl[sl].reshape(-1, c)
                gw[:, :, i, j] = g2.T @ patch
            if need_x:
                gxp[sl] += gl @ w[:, :, i, j]
    if need_x:
        gxp = gxp.transpose(0, 3, 1, 2)
    return gxp, gw


def _im2col(xp, k, stride, ho, wo):
    """(N, C*k*k, Ho*Wo) patch matrix, filled one tap at a time."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _forward_im2col(xp, w, stride, ho, wo):
    n = xp.shape[0]
    o, c, k, _ = w.shape
    cols = _im2col(xp, k, stride, ho, wo)
    out = np.matmul(w.reshape(o, -1), cols)
    return out.reshape(n, o, ho, wo), cols


def _backward_im2col(xp, w, g, cols, stride, ho, wo, need_x, need_w):
    n = xp.shape[0]
    o, c, k, _ = w.shape
    g3 = g.reshape(n, o, ho * wo)
    gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if need_w else None
    gxp = None
    if need_x:
        gcols = np.matmul(w.reshape(o, -1).T, g3).reshape(n, c, k, k, ho, wo)
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
    return gxp, gw


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0, method: str | None = None) -> Tensor:
    """2-D cross-correlation of an NCHW input with an OIkk kernel (zero padding)."""
    k, ho, wo = _check(x, weight, bias, stride, padding)
    method = method or _default_method
    if method not in CONV_METHODS:
        raise ValueError(f"unknown convolution method {method!r}")
    xp = _pad(x.data, padding)
    w = weight.data
    cols = None
    if method == "direct":
        out = _forward_direct(xp, w, stride, ho, wo)
    else:
        out, cols = _forward_im2col(xp, w, stride, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        need_x, need_w = x.requires_grad, weight.requires_grad
        if method == "direct":
            gxp, gw = _backward_direct(xp, w, g, stride, ho, wo, need_x, need_w)
        else:
            gxp, gw = _backward_im2col(xp, w, g, cols, stride, ho, wo, need_x, need_w)
        gx = None
        if gxp is not None:
            h, wd = x.shape[2], x.shape[3]
            gx = gxp[:, :, padding : padding + h, padding : padding + wd]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return tuple(grads)

    return Tensor._from_op(out.astype(x.dtype, copy=False), parents, backward)


def resample2x(x: Tensor, direction: str) -> Tensor:
    """2x2 average pooling (``down``) or nearest-neighbour 2x upsampling (``up``)."""
    n, c, h, w = x.shape
    if direction == "down":
        if h % 2 or w % 2:
            raise ValueError(f"down-resampling needs even extents, got {h}x{w}")
        out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

        def backward(g):
            q = g * x.dtype.type(0.25)
            return (np.repeat(np.repeat(q, 2, axis=2), 2, axis=3),)

    elif direction == "up":
        out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

        def backward(g):
            return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    else:
        raise ValueError(f"direction must be 'down' or 'up', got {direction!r}")
    return Tensor._from_op(out.astype(x.dtype, copy=False), (x,), backward)
