"""Hot numeric kernels: 2-D convolution (forward and both backward passes),
box IoU matrices and greedy detection matching.

Every kernel has a numba ``@njit`` implementation and a pure-numpy
fallback with the same signature. The active path is chosen once at
import time:

    VLCFUSION_NUMBA=0   force the numpy fallback
    VLCFUSION_NUMBA=1   use numba when it is importable (default)

Both paths stay importable as ``nb_*`` / ``np_*`` so tests and the
benchmark script can compare them directly.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]

        def decorator(func):
            return func

        return decorator


USE_NUMBA = NUMBA_AVAILABLE and os.environ.get("VLCFUSION_NUMBA", "1").strip() not in ("0", "false", "no")


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


# =============================================================================
# numba kernels
# =============================================================================


@njit(cache=True)
def _valid_range(k_off, pad, stride, n_in, n_out):
    # output positions o with 0 <= o*stride + k_off - pad < n_in
    lo = 0
    while lo < n_out and lo * stride + k_off - pad < 0:
        lo += 1
    hi = n_out
    while hi > lo and (hi - 1) * stride + k_off - pad >= n_in:
        hi -= 1
    return lo, hi


@njit(cache=True)
def _nb_im2col(x, KH, KW, stride, pad, OH, OW):
    # rows index (c, i, j), columns index (b, oh, ow); out-of-bounds taps stay 0
    B, C, H, W = x.shape
    return _nb_fill_cols(x, np.zeros((C * KH * KW, B * OH * OW), dtype=x.dtype), KH, KW, stride, pad, OH, OW, False)


@njit(cache=True)
def _nb_fill_cols(x, cols, KH, KW, stride, pad, OH, OW, transposed):
    B, C, H, W = x.shape
    for c in range(C):
        for i in range(KH):
            h_lo, h_hi = _valid_range(i, pad, stride, H, OH)
            for j in range(KW):
                w_lo, w_hi = _valid_range(j, pad, stride, W, OW)
                r = (c * KH + i) * KW + j
                for b in range(B):
                    for oh in range(h_lo, h_hi):
                        ih = oh * stride + i - pad
                        base = (b * OH + oh) * OW
                        for ow in range(w_lo, w_hi):
                            if transposed:
                                cols[base + ow, r] = x[b, c, ih, ow * stride + j - pad]
                            else:
                                cols[r, base + ow] = x[b, c, ih, ow * stride + j - pad]
    return cols


@njit(cache=True)
def _nb_col2im(cols, B, C, H, W, KH, KW, stride, pad, OH, OW):
    gx = np.zeros((B, C, H, W), dtype=cols.dtype)
    for c in range(C):
        for i in range(KH):
            h_lo, h_hi = _valid_range(i, pad, stride, H, OH)
            for j in range(KW):
                w_lo, w_hi = _valid_range(j, pad, stride, W, OW)
                r = (c * KH + i) * KW + j
                for b in range(B):
                    for oh in range(h_lo, h_hi):
                        ih = oh * stride + i - pad
                        base = (b * OH + oh) * OW
                        for ow in range(w_lo, w_hi):
                            gx[b, c, ih, ow * stride + j - pad] += cols[r, base + ow]
    return gx


@njit(cache=True)
def _nb_to_rows(g):
    # (B, O, OH, OW) -> (O, B*OH*OW)
    B, O, OH, OW = g.shape
    out = np.empty((O, B * OH * OW), dtype=g.dtype)
    for b in range(B):
        for o in range(O):
            for oh in range(OH):
                for ow in range(OW):
                    out[o, (b * OH + oh) * OW + ow] = g[b, o, oh, ow]
    return out


@njit(cache=True)
def nb_conv2d_forward(x, w, stride, pad):
    B, C, H, W = x.shape
    O, _, KH, KW = w.shape
    OH = (H + 2 * pad - KH) // stride + 1
    OW = (W + 2 * pad - KW) // stride + 1
    cols = _nb_im2col(x, KH, KW, stride, pad, OH, OW)
    y = np.dot(np.ascontiguousarray(w).reshape(O, C * KH * KW), cols)
    out = np.empty((B, O, OH, OW), dtype=x.dtype)
    for b in range(B):
        for o in range(O):
            for oh in range(OH):
                for ow in range(OW):
                    out[b, o, oh, ow] = y[o, (b * OH + oh) * OW + ow]
    return out


@njit(cache=True)
def nb_conv2d_backward_input(g, w, H, W, stride, pad):
    B, O, OH, OW = g.shape
    _, C, KH, KW = w.shape
    w2 = np.ascontiguousarray(np.ascontiguousarray(w).reshape(O, C * KH * KW).T)
    cols = np.dot(w2, _nb_to_rows(g))
    return _nb_col2im(cols, B, C, H, W, KH, KW, stride, pad, OH, OW)


@njit(cache=True)
def nb_conv2d_backward_weight(g, x, KH, KW, stride, pad):
    B, O, OH, OW = g.shape
    C = x.shape[1]
    cols_t = _nb_fill_cols(x, np.zeros((B * OH * OW, C * KH * KW), dtype=x.dtype), KH, KW, stride, pad, OH, OW, True)
    gw = np.dot(_nb_to_rows(g), cols_t)
    return gw.reshape(O, C, KH, KW)


@njit(cache=True)
def nb_iou_matrix(a, b):
    n = a.shape[0]
    m = b.shape[0]
    out = np.zeros((n, m), dtype=np.float64)
    for p in range(n):
        area_a = (a[p, 2] - a[p, 0]) * (a[p, 3] - a[p, 1])
        for q in range(m):
            iw = min(a[p, 2], b[q, 2]) - max(a[p, 0], b[q, 0])
            ih = min(a[p, 3], b[q, 3]) - max(a[p, 1], b[q, 1])
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            area_b = (b[q, 2] - b[q, 0]) * (b[q, 3] - b[q, 1])
            out[p, q] = inter / (area_a + area_b - inter)
    return out


@njit(cache=True)
def nb_greedy_match(ious, thresh):
    # rows of ``ious`` are detections already in descending-score order
    n, m = ious.shape
    taken = np.zeros(m, dtype=np.bool_)
    matched = np.full(n, -1, dtype=np.int64)
    for d in range(n):
        best = -1
        best_iou = thresh
        for g in range(m):
            if taken[g]:
                continue
            v = ious[d, g]
            if v >= best_iou and (best < 0 or v > ious[d, best]):
                best = g
                best_iou = v
        if best >= 0:
            taken[best] = True
            matched[d] = best
    return matched


# =============================================================================
# numpy fallbacks
# =============================================================================


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # (B, C, OH, OW, KH, KW)


def np_conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    kh, kw = w.shape[2:]
    win = _windows(x, kh, kw, stride, pad)
    return np.ascontiguousarray(np.einsum("bchwij,ocij->bohw", win, w, optimize=True))


def np_conv2d_backward_input(g: np.ndarray, w: np.ndarray, H: int, W: int, stride: int, pad: int) -> np.ndarray:
    B, O, OH, OW = g.shape
    C, kh, kw = w.shape[1:]
    gxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            contrib = np.einsum("bohw,oc->bchw", g, w[:, :, i, j])
            gxp[:, :, i : i + stride * OH : stride, j : j + stride * OW : stride] += contrib
    return np.ascontiguousarray(gxp[:, :, pad : pad + H, pad : pad + W])


def np_conv2d_backward_weight(g: np.ndarray, x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    win = _windows(x, kh, kw, stride, pad)
    return np.einsum("bohw,bchwij->ocij", g, win, optimize=True)


def np_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def np_greedy_match(ious: np.ndarray, thresh: float) -> np.ndarray:
    n, m = ious.shape
    taken = np.zeros(m, dtype=bool)
    matched = np.full(n, -1, dtype=np.int64)
    for d in range(n):
        cand = np.where(taken, -1.0, ious[d])
        g = int(np.argmax(cand)) if m else -1
        if g >= 0 and cand[g] >= thresh:
            taken[g] = True
            matched[d] = g
    return matched


# =============================================================================
# dispatch
# =============================================================================


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    if USE_NUMBA:
        return nb_conv2d_forward(x, w, stride, pad)
    return np_conv2d_forward(x, w, stride, pad)


def conv2d_backward_input(g, w, H, W, stride=1, pad=0):
    g = np.ascontiguousarray(g)
    w = np.ascontiguousarray(w, dtype=g.dtype)
    if USE_NUMBA:
        return nb_conv2d_backward_input(g, w, H, W, stride, pad)
    return np_conv2d_backward_input(g, w, H, W, stride, pad)


def conv2d_backward_weight(g, x, kh, kw, stride=1, pad=0):
    g = np.ascontiguousarray(g)
    x = np.ascontiguousarray(x, dtype=g.dtype)
    if USE_NUMBA:
        return nb_conv2d_backward_weight(g, x, kh, kw, stride, pad)
    return np_conv2d_backward_weight(g, x, kh, kw, stride, pad)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(a, dtype=np.float64).reshape(-1, 4))
    b = np.ascontiguousarray(np.asarray(b, dtype=np.float64).reshape(-1, 4))
    if USE_NUMBA:
        return nb_iou_matrix(a, b)
    return np_iou_matrix(a, b)


def greedy_match(ious: np.ndarray, thresh: float) -> np.ndarray:
    ious = np.ascontiguousarray(ious, dtype=np.float64)
    if USE_NUMBA:
        return nb_greedy_match(ious, float(thresh))
    return np_greedy_match(ious, float(thresh))
