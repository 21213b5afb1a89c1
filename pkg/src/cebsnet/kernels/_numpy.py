"""Pure-numpy reference kernels.

Every function here has a numba twin in ``_numba.py`` with the identical
signature; results agree to floating-point summation order.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride, pad):
    """(B, C, H, W) -> (B, C*kh*kw, Ho*Wo) patch matrix."""
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # (B, C, Ho, Wo, kh, kw) -> (B, C, kh, kw, Ho, Wo)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols)


def col2im(cols, shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add patches back into an image."""
    b, c, h, w = shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def maxpool_forward(x, k, stride, pad):
    """Return (out, argmax) where argmax holds flat indices into the unpadded H*W plane.

    Ties resolve to the first maximum in row-major window order.
    """
    b, c, h, w = x.shape
    if pad:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    else:
        xp = x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(b, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(arg, k)
    rows = np.arange(ho)[:, None] * stride + di - pad
    cols = np.arange(wo)[None, :] * stride + dj - pad
    idx = (rows * w + cols).astype(np.int64)
    return np.ascontiguousarray(out), idx


def maxpool_backward(grad, idx, shape):
    b, c, h, w = shape
    g = grad.reshape(b * c, -1)
    ix = idx.reshape(b * c, -1)
    out = np.zeros((b * c, h * w), dtype=grad.dtype)
    for n in range(b * c):
        out[n] = np.bincount(ix[n], weights=g[n], minlength=h * w)
    return out.reshape(shape)


def region_expand(e, row_of, col_of):
    """Broadcast a (B, k, k) grid over an (H, W) plane -> (B, 1, H, W)."""
    return np.ascontiguousarray(e[:, row_of][:, :, col_of][:, None])


def region_reduce(grad, row_start, col_start):
    """Adjoint of :func:`region_expand`: sum each sub-region -> (B, k, k)."""
    g = grad.sum(axis=1)
    g = np.add.reduceat(g, row_start, axis=1)
    g = np.add.reduceat(g, col_start, axis=2)
    return g
