"""Window partitioning, relative position bias and windowed attention."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from ..autodiff import Tensor, ops

# additive logit for token pairs that straddle a cyclic-shift boundary
MASK_VALUE = -1e9


def _check_divisible(h: int, w: int, window: int) -> None:
    if window < 1 or h % window or w % window:
        raise ValueError(f"feature map {h}x{w} is not divisible by window size {window}")


def window_partition(x: Tensor, window: int) -> Tensor:
    """(B, H, W, C) -> (B * H/window * W/window, window*window, C)."""
    b, h, w, c = x.shape
    _check_divisible(h, w, window)
    y = ops.reshape(x, (b, h // window, window, w // window, window, c))
    y = ops.transpose(y, (0, 1, 3, 2, 4, 5))
    return ops.reshape(y, (b * (h // window) * (w // window), window * window, c))


def window_reverse(windows: Tensor, window: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    _check_divisible(h, w, window)
    nw = (h // window) * (w // window)
    bn, l, c = windows.shape
    if l != window * window or bn % nw:
        raise ValueError(f"window tensor {windows.shape} does not tile a {h}x{w} map with window {window}")
    b = bn // nw
    y = ops.reshape(windows, (b, h // window, w // window, window, window, c))
    y = ops.transpose(y, (0, 1, 3, 2, 4, 5))
    return ops.reshape(y, (b, h, w, c))


@lru_cache(maxsize=None)
def relative_position_index(window: int) -> np.ndarray:
    """(l, l) integer index into a ((2w-1)^2,) table; depends only on the 2-D offset."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel.transpose(1, 2, 0) + (window - 1)
    idx = rel[:, :, 0] * (2 * window - 1) + rel[:, :, 1]
    idx.setflags(write=False)
    return idx


@lru_cache(maxsize=None)
def shift_mask(h: int, w: int, window: int, shift: int) -> np.ndarray:
    """(nW, l, l) additive mask: 0 inside a region, MASK_VALUE across regions."""
    label = np.zeros((h, w))
    cnt = 0
    spans = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    for hs in spans:
        for ws in spans:
            label[hs, ws] = cnt
            cnt += 1
    lw = label.reshape(h // window, window, w // window, window).transpose(0, 2, 1, 3).reshape(-1, window * window)
    diff = lw[:, None, :] - lw[:, :, None]
    mask = np.where(diff != 0, MASK_VALUE, 0.0)
    mask.setflags(write=False)
    return mask


def window_attention(q: Tensor, k: Tensor, v: Tensor, bias=None, mask=None, probs_out: list | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d) + bias + mask) v over the key axis.

    ``q`` is (..., l, d); ``k``/``v`` are (..., n, d). ``bias`` and ``mask``
    broadcast against the (..., l, n) logits. When ``probs_out`` is a list the
    attention probabilities are appended to it.
    """
    return ops.attention(q, k, v, bias, mask, probs_out)
