"""Gather/scatter kernels behind conv2d and maxpool2.

The scatter-style kernels are numba-compiled when numba is importable;
otherwise numpy fallbacks give the same results, more slowly.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None


def out_size(padded: int, k: int, stride: int) -> int:
    return (padded - k) // stride + 1


def _np_im2col(xp, k, stride=1):
    n, hp, wp, c = xp.shape
    h, w = out_size(hp, k, stride), out_size(wp, k, stride)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c)


def _np_col2im(dcols, xp_shape, k, stride=1):
    n, hp, wp, c = xp_shape
    h, w = out_size(hp, k, stride), out_size(wp, k, stride)
    d = dcols.reshape(n, h, w, k, k, c)
    out = np.zeros(xp_shape, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i:i + stride * (h - 1) + 1:stride, j:j + stride * (w - 1) + 1:stride, :] += d[:, :, :, i, j, :]
    return out


def _np_pool(x):
    n, h, w, c = x.shape
    quads = [x[:, i::2, j::2, :] for i in (0, 1) for j in (0, 1)]
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    arg = np.full(out.shape, 3, dtype=np.uint8)
    for q in (2, 1, 0):
        arg[quads[q] == out] = q
    return out, arg


def _np_unpool(g, arg):
    n, h2, w2, c = g.shape
    dx = np.zeros((n, 2 * h2, 2 * w2, c), dtype=g.dtype)
    for q, (i, j) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        dx[:, i::2, j::2, :] = np.where(arg == q, g, 0)
    return dx


if numba is not None:
    @numba.njit(cache=True)
    def _nb_col2im(dcols, k, stride, h, w, out):
        n, hp, wp, c = out.shape
        for b in range(n):
            for y in range(h):
                for x in range(w):
                    row = (b * h + y) * w + x
                    for i in range(k):
                        for j in range(k):
                            base = (i * k + j) * c
                            for ch in range(c):
                                out[b, y * stride + i, x * stride + j, ch] += dcols[row, base + ch]

    @numba.njit(cache=True)
    def _nb_pool(x, out, arg):
        n, h2, w2, c = out.shape
        for b in range(n):
            for y in range(h2):
                for xx in range(w2):
                    for ch in range(c):
                        best = x[b, 2 * y, 2 * xx, ch]
                        a = 0
                        v = x[b, 2 * y, 2 * xx + 1, ch]
                        if v > best:
                            best = v
                            a = 1
                        v = x[b, 2 * y + 1, 2 * xx, ch]
                        if v > best:
                            best = v
                            a = 2
                        v = x[b, 2 * y + 1, 2 * xx + 1, ch]
                        if v > best:
                            best = v
                            a = 3
                        out[b, y, xx, ch] = best
                        arg[b, y, xx, ch] = a

    @numba.njit(cache=True)
    def _nb_unpool(g, arg, dx):
        n, h2, w2, c = g.shape
        for b in range(n):
            for y in range(h2):
                for xx in range(w2):
                    for ch in range(c):
                        a = arg[b, y, xx, ch]
                        dx[b, 2 * y + a // 2, 2 * xx + a % 2, ch] = g[b, y, xx, ch]


def im2col(xp: np.ndarray, k: int, stride: int = 1) -> np.ndarray:
    """Padded NHWC input -> (N*Ho*Wo, k*k*C) patch matrix, (ki, kj, c) column order."""
    return _np_im2col(xp, k, stride)


def col2im(dcols: np.ndarray, xp_shape: tuple, k: int, stride: int = 1) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients into the padded input."""
    if numba is None:
        return _np_col2im(dcols, xp_shape, k, stride)
    out = np.zeros(xp_shape, dtype=dcols.dtype)
    h, w = out_size(xp_shape[1], k, stride), out_size(xp_shape[2], k, stride)
    _nb_col2im(np.ascontiguousarray(dcols), k, stride, h, w, out)
    return out


def pool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2/stride-2 max and the index (0..3, row-major, first max wins) it came from."""
    if numba is None:
        return _np_pool(x)
    n, h, w, c = x.shape
    out = np.empty((n, h // 2, w // 2, c), dtype=x.dtype)
    arg = np.empty(out.shape, dtype=np.uint8)
    _nb_pool(np.ascontiguousarray(x), out, arg)
    return out, arg


def unpool2(g: np.ndarray, arg: np.ndarray) -> np.ndarray:
    if numba is None:
        return _np_unpool(g, arg)
    n, h2, w2, c = g.shape
    dx = np.zeros((n, 2 * h2, 2 * w2, c), dtype=g.dtype)
    _nb_unpool(np.ascontiguousarray(g), arg, dx)
    return dx
