"""Numba-compiled kernels, same contracts as ``_numpy.py``.

Parallel loops only ever split over independent (batch, channel) planes, so
every output element is accumulated by a single thread in a fixed order.
"""

import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True)
def _im2col(x, kh, kw, stride, pad, ho, wo):
    b, c, h, w = x.shape
    cols = np.zeros((b, c * kh * kw, ho * wo), dtype=x.dtype)
    for n in prange(b * c):
        bi = n // c
        ci = n % c
        for i in range(kh):
            for j in range(kw):
                row = (ci * kh + i) * kw + j
                for oy in range(ho):
                    iy = oy * stride + i - pad
                    if iy < 0 or iy >= h:
                        continue
                    for ox in range(wo):
                        ix = ox * stride + j - pad
                        if ix >= 0 and ix < w:
                            cols[bi, row, oy * wo + ox] = x[bi, ci, iy, ix]
    return cols


def im2col(x, kh, kw, stride, pad):
    h, w = x.shape[2], x.shape[3]
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    return _im2col(np.ascontiguousarray(x), kh, kw, stride, pad, ho, wo)


@njit(cache=True, parallel=True)
def _col2im(cols, b, c, h, w, kh, kw, stride, pad, ho, wo):
    out = np.zeros((b, c, h, w), dtype=cols.dtype)
    for n in prange(b * c):
        bi = n // c
        ci = n % c
        for i in range(kh):
            for j in range(kw):
                row = (ci * kh + i) * kw + j
                for oy in range(ho):
                    iy = oy * stride + i - pad
                    if iy < 0 or iy >= h:
                        continue
                    for ox in range(wo):
                        ix = ox * stride + j - pad
                        if ix >= 0 and ix < w:
                            out[bi, ci, iy, ix] += cols[bi, row, oy * wo + ox]
    return out


def col2im(cols, shape, kh, kw, stride, pad):
    b, c, h, w = shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    return _col2im(np.ascontiguousarray(cols), b, c, h, w, kh, kw, stride, pad, ho, wo)


@njit(cache=True, parallel=True)
def _maxpool_forward(x, k, stride, pad, ho, wo):
    b, c, h, w = x.shape
    out = np.empty((b, c, ho, wo), dtype=x.dtype)
    idx = np.empty((b, c, ho, wo), dtype=np.int64)
    for n in prange(b * c):
        bi = n // c
        ci = n % c
        for oy in range(ho):
            for ox in range(wo):
                best = -np.inf
                arg = -1
                for i in range(k):
                    iy = oy * stride + i - pad
                    for j in range(k):
                        ix = ox * stride + j - pad
                        if iy < 0 or iy >= h or ix < 0 or ix >= w:
                            continue
                        v = x[bi, ci, iy, ix]
                        if v > best or arg < 0:
                            best = v
                            arg = iy * w + ix
                out[bi, ci, oy, ox] = best
                idx[bi, ci, oy, ox] = arg
    return out, idx


def maxpool_forward(x, k, stride, pad):
    h, w = x.shape[2], x.shape[3]
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    return _maxpool_forward(np.ascontiguousarray(x), k, stride, pad, ho, wo)


@njit(cache=True, parallel=True)
def _maxpool_backward(grad, idx, b, c, h, w):
    out = np.zeros((b, c, h * w), dtype=grad.dtype)
    ho, wo = grad.shape[2], grad.shape[3]
    for n in prange(b * c):
        bi = n // c
        ci = n % c
        acc = np.zeros(h * w, dtype=np.float64)
        for oy in range(ho):
            for ox in range(wo):
                acc[idx[bi, ci, oy, ox]] += grad[bi, ci, oy, ox]
        for p in range(h * w):
            out[bi, ci, p] = acc[p]
    return out.reshape((b, c, h, w))


def maxpool_backward(grad, idx, shape):
    b, c, h, w = shape
    return _maxpool_backward(np.ascontiguousarray(grad), idx, b, c, h, w)


@njit(cache=True)
def region_expand(e, row_of, col_of):
    b = e.shape[0]
    h, w = row_of.shape[0], col_of.shape[0]
    out = np.empty((b, 1, h, w), dtype=e.dtype)
    for bi in range(b):
        for y in range(h):
            r = row_of[y]
            for x in range(w):
                out[bi, 0, y, x] = e[bi, r, col_of[x]]
    return out


@njit(cache=True)
def _region_reduce(grad, row_of, col_of, k):
    b, c, h, w = grad.shape
    out = np.zeros((b, k, k), dtype=grad.dtype)
    for bi in range(b):
        for ci in range(c):
            for y in range(h):
                r = row_of[y]
                for x in range(w):
                    out[bi, r, col_of[x]] += grad[bi, ci, y, x]
    return out


def region_reduce(grad, row_start, col_start):
    h, w = grad.shape[2], grad.shape[3]
    row_of = np.repeat(np.arange(len(row_start)), np.diff(np.append(row_start, h)))
    col_of = np.repeat(np.arange(len(col_start)), np.diff(np.append(col_start, w)))
    return _region_reduce(np.ascontiguousarray(grad), row_of, col_of, len(row_start))
