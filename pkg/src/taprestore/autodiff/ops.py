"""Differentiable kernels over :class:`Tensor`.

Every op computes its forward value with numpy and records a closure that maps
the output gradient to one gradient per input. Elementwise ops broadcast the
numpy way and reduce gradients back to each input's shape.
"""

from __future__ import annotations

import builtins
import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor

__all__ = [
    "as_tensor", "add", "sub", "mul", "div", "neg", "power", "exp", "log", "sqrt",
    "abs", "tanh", "relu", "gelu", "clamp", "matmul", "sum", "mean", "var",
    "reshape", "transpose", "swapaxes", "broadcast_to", "concat", "split", "stack",
    "index", "roll", "softmax", "attention", "logsumexp", "conv2d", "pixel_shuffle",
    "pixel_unshuffle", "l1_norm", "l2_norm", "cosine_similarity",
]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(g, sb) if b.requires_grad else None)

    return Tensor._from_op(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(-g, sb) if b.requires_grad else None)

    return Tensor._from_op(a.data - b.data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(ad * bd, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, "div", (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, "neg", (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    p = float(exponent)

    def backward(g):
        return (g * p * ad ** (p - 1.0),)

    return Tensor._from_op(ad ** p, "pow", (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._from_op(np.log(ad), "log", (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._from_op(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    ad = a.data
    return Tensor._from_op(np.abs(ad), "abs", (a,), lambda g: (g * np.sign(ad),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._from_op(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._from_op(np.maximum(ad, 0.0), "relu", (a,), lambda g: (g * (ad > 0),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = x2 * 0.044715
    t += 1.0
    t *= x
    t *= _GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= x
    out *= 0.5

    def backward(g):
        # d/dx = 0.5(1+t) + 0.5 x (1-t^2) c (1 + 3*0.044715 x^2)
        d = x2 * (3 * 0.044715)
        d += 1.0
        d *= _GELU_C
        d *= x
        d *= 0.5
        d *= 1.0 - t * t
        d += 0.5 * (1.0 + t)
        d *= g
        return (d,)

    return Tensor._from_op(out, "gelu", (a,), backward)


def clamp(a: Tensor, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return Tensor._from_op(np.clip(ad, lo, hi), "clamp", (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul needs at least 2-D operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {ad.shape} x {bd.shape}")

    if bd.ndim == 2:
        # shared weight: fold all batch dims into rows so one gemm does the work
        k = ad.shape[-1]
        a2 = ad.reshape(-1, k)
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def backward(g):
            g2 = g.reshape(-1, bd.shape[1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return Tensor._from_op(out, "matmul", (a, b), backward)

    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise ValueError(f"matmul batch dimensions not broadcastable: {ad.shape} x {bd.shape}") from exc

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, "matmul", (a, b), backward)


def attention(q: Tensor, k: Tensor, v: Tensor, bias=None, mask=None, probs_out: list | None = None) -> Tensor:
    """Fused softmax(q k^T * scale + bias + mask) v with scale = 1/sqrt(d).

    ``q`` is (..., l, d), ``k``/``v`` (..., n, d); ``bias`` (a tensor) and
    ``mask`` (a constant array) broadcast against the (..., l, n) logits.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    qd, kd, vd = q.data, k.data, v.data
    p = np.matmul(qd, np.swapaxes(kd, -1, -2))
    p *= scale
    bias = as_tensor(bias) if bias is not None else None
    if bias is not None:
        p += bias.data
    if mask is not None:
        p += mask
    p -= p.max(axis=-1, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)
    if probs_out is not None:
        probs_out.append(p)
    out = np.matmul(p, vd)
    parents = (q, k, v) if bias is None else (q, k, v, bias)

    def backward(g):
        gv = _unbroadcast(np.matmul(np.swapaxes(p, -1, -2), g), vd.shape) if v.requires_grad else None
        ds = np.matmul(g, np.swapaxes(vd, -1, -2))
        ds -= (ds * p).sum(axis=-1, keepdims=True)
        ds *= p
        gbias = _unbroadcast(ds, bias.shape) if bias is not None and bias.requires_grad else None
        ds *= scale
        gq = _unbroadcast(np.matmul(ds, kd), qd.shape) if q.requires_grad else None
        gk = _unbroadcast(np.matmul(np.swapaxes(ds, -1, -2), qd), kd.shape) if k.requires_grad else None
        grads = (gq, gk, gv)
        return grads if bias is None else grads + (gbias,)

    return Tensor._from_op(out, "attention", parents, backward)


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(out), "sum", (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return Tensor._from_op(np.asarray(out), "mean", (a,), backward)


def var(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (divides by the element count)."""
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= shape[ax]
    centered = a.data - a.data.mean(axis=axes, keepdims=True)
    out = (centered * centered).mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * (2.0 / count) * centered,)

    return Tensor._from_op(np.asarray(out), "var", (a,), backward)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    probs = e / s
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * probs,)

    return Tensor._from_op(out, "logsumexp", (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} out of range for shape {x.shape}")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, "softmax", (a,), backward)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape)
    return Tensor._from_op(out, "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return Tensor._from_op(out, "transpose", (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    out = np.ascontiguousarray(np.broadcast_to(a.data, tuple(shape)))
    return Tensor._from_op(out, "broadcast_to", (a,), lambda g: (_unbroadcast(g, old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty sequence")
    ndim = tensors[0].ndim
    axis = axis % ndim
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(part) for part in np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, "concat", tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in tensors]
    return concat(expanded, axis=axis)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def index(a: Tensor, idx) -> Tensor:
    shape = a.shape
    out = np.ascontiguousarray(a.data[idx])

    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(out, "index", (a,), backward)


def split(a: Tensor, sections, axis: int = 0) -> list:
    """Split into pieces of the given sizes (or ``sections`` equal pieces)."""
    axis = axis % a.ndim
    n = a.shape[axis]
    if isinstance(sections, int):
        if n % sections:
            raise ValueError(f"axis of size {n} does not split into {sections} equal parts")
        sizes = [n // sections] * sections
    else:
        sizes = list(sections)
        if builtins.sum(sizes) != n:
            raise ValueError(f"split sizes {sizes} do not add up to {n}")
    pieces = []
    start = 0
    for size in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + size)
        pieces.append(index(a, tuple(sl)))
        start += size
    return pieces


def roll(a: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    out = np.roll(a.data, shifts, axis=axes)
    back = tuple(-s for s in shifts)
    return Tensor._from_op(out, "roll", (a,), lambda g: (np.roll(g, back, axis=axes),))


def pixel_unshuffle(x: Tensor, factor: int) -> Tensor:
    """Space-to-depth on channel-last images: (B, H, W, C) -> (B, H/f, W/f, f*f*C)."""
    b, h, w, c = x.shape
    if h % factor or w % factor:
        raise ValueError(f"spatial size {(h, w)} not divisible by {factor}")
    y = reshape(x, (b, h // factor, factor, w // factor, factor, c))
    y = transpose(y, (0, 1, 3, 2, 4, 5))
    return reshape(y, (b, h // factor, w // factor, factor * factor * c))


def pixel_shuffle(x: Tensor, factor: int) -> Tensor:
    """Depth-to-space, the exact inverse of :func:`pixel_unshuffle`."""
    b, h, w, c = x.shape
    if c % (factor * factor):
        raise ValueError(f"channel count {c} not divisible by {factor * factor}")
    oc = c // (factor * factor)
    y = reshape(x, (b, h, w, factor, factor, oc))
    y = transpose(y, (0, 1, 3, 2, 4, 5))
    return reshape(y, (b, h * factor, w * factor, oc))


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Channel-last 2-D cross-correlation.

    ``x`` is (B, H, W, Cin), ``w`` is (kh, kw, Cin, Cout) with odd kernel sizes.
    Zero padding of ``pad`` pixels on every side.
    """
    x, w = as_tensor(x), as_tensor(w)
    if not isinstance(stride, int) or stride < 1:
        raise ValueError(f"conv2d stride must be a positive integer, got {stride!r}")
    if not isinstance(pad, int) or pad < 0:
        raise ValueError(f"conv2d pad must be a non-negative integer, got {pad!r}")
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects (B,H,W,C) input and (kh,kw,Cin,Cout) kernel, got {x.shape}, {w.shape}")
    kh, kw, cin, cout = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel sizes must be odd, got {(kh, kw)}")
    if x.shape[3] != cin:
        raise ValueError(f"conv2d channel mismatch: input has {x.shape[3]}, kernel expects {cin}")
    b, h, wd, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    hp, wp = xp.shape[1], xp.shape[2]
    if hp < kh or wp < kw:
        raise ValueError(f"conv2d kernel {(kh, kw)} larger than padded input {(hp, wp)}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    # (B, Ho, Wo, Cin, kh, kw) -> rows of (kh, kw, Cin) patches
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * ho * wo, kh * kw * cin)
    w2 = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ w2).reshape(b, ho, wo, cout)
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(b, ho, wo, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, pad:pad + h, pad:pad + wd, :] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0) if bias.requires_grad else None)
        return tuple(grads)

    return Tensor._from_op(out, "conv2d", parents, backward)


# ---------------------------------------------------------------------------
# norms and similarity (composites)


def l1_norm(a: Tensor, axis=None) -> Tensor:
    return sum(abs(a), axis=axis)


def l2_norm(a: Tensor, axis=None, eps: float = 0.0) -> Tensor:
    sq = sum(mul(a, a), axis=axis)
    if eps:
        sq = add(sq, eps)
    return sqrt(sq)


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1, eps: float = 1e-24) -> Tensor:
    """Cosine similarity along ``axis``; ``eps`` guards the zero vector only."""
    num = sum(mul(a, b), axis=axis)
    den = mul(l2_norm(a, axis=axis, eps=eps), l2_norm(b, axis=axis, eps=eps))
    return div(num, den)

