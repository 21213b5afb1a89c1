"""Differentiable tensor operations.

Each function computes its forward value with numpy (or a kernel from
:mod:`cebsnet.kernels`) and registers the exact adjoint. Activations are
(batch, channel, height, width) unless stated otherwise.
"""

from functools import lru_cache

import numpy as np

from . import kernels
from .tensor import ContractError, Tensor, as_tensor

ALIGN_CORNERS = False


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    return as_tensor(a, like=b), b


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._make(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = _pair(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data * b.data, (a, b), backward, "mul")


def absolute(x):
    sign = np.sign(x.data)

    def backward(g):
        return (g * sign,)

    return Tensor._make(np.abs(x.data), (x,), backward, "abs")


def relu(x):
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return Tensor._make(np.where(mask, x.data, 0).astype(x.dtype), (x,), backward, "relu")


def sigmoid(x):
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)

    def backward(g):
        return (g * y * (1 - y),)

    return Tensor._make(y, (x,), backward, "sigmoid")


def softmax(x, axis):
    if not -x.ndim <= axis < x.ndim:
        raise ContractError(f"softmax axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._make(y, (x,), backward, "softmax")


# ------------------------------------------------------------------- shaping

def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref):
            raise ContractError(f"concat rank mismatch: {t.shape} vs {ref}")
        for ax, (n, m) in enumerate(zip(t.shape, ref)):
            if ax != axis % len(ref) and n != m:
                raise ContractError(f"concat extent mismatch on axis {ax}: {n} vs {m}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def split(x, sizes, axis=1):
    """Split along ``axis`` into pieces of the given extents (must sum to the axis)."""
    if sum(sizes) != x.shape[axis]:
        raise ContractError(f"split sizes {sizes} do not sum to extent {x.shape[axis]}")
    bounds = np.cumsum(sizes)[:-1]
    outs = []
    for i, piece in enumerate(np.split(x.data, bounds, axis=axis)):
        def backward(g, i=i):
            full = [np.zeros_like(p) for p in np.split(x.data, bounds, axis=axis)]
            full[i] = g
            return (np.concatenate(full, axis=axis),)

        outs.append(Tensor._make(np.ascontiguousarray(piece), (x,), backward, "split"))
    return outs


def stack(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward, "stack")


def reshape(x, shape):
    def backward(g):
        return (g.reshape(x.shape),)

    return Tensor._make(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x, axes):
    inv = np.argsort(axes)

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return Tensor._make(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward, "transpose")


# ---------------------------------------------------------------- reductions

def mean(x, axis, keepdims=True):
    axis = tuple(np.atleast_1d(axis))
    n = int(np.prod([x.shape[a] for a in axis]))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return Tensor._make(x.data.mean(axis=axis, keepdims=keepdims), (x,), backward, "mean")


def reduce_sum(x):
    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return Tensor._make(np.asarray(x.data.sum()), (x,), backward, "sum")


def global_avg_pool(x):
    """(B, C, H, W) -> (B, C, 1, 1)."""
    return mean(x, (2, 3))


def matmul(a, b):
    a, b = _pair(a, b)

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data @ b.data, (a, b), backward, "matmul")


# -------------------------------------------------------------- convolution

def conv_output_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation with weight (O, C, kh, kw) and optional bias (O,)."""
    if x.ndim != 4:
        raise ContractError(f"conv2d expects a rank-4 input, got shape {x.shape}")
    b, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise ContractError(f"conv2d in_ch mismatch: input has {c} channels, weight expects {ci}")
    if bias is not None and bias.shape != (o,):
        raise ContractError(f"conv2d bias shape {bias.shape} != ({o},)")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ContractError(f"conv2d kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = x.data.reshape(b, c, h * w)
    else:
        cols = kernels.im2col(x.data, kh, kw, stride, padding)
    w2 = weight.data.reshape(o, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(b, o, ho, wo)

    def backward(g):
        g2 = g.reshape(b, o, ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            if pointwise:
                gx = gcols.reshape(x.shape)
            else:
                gx = kernels.col2im(gcols, x.shape, kh, kw, stride, padding)
        if weight.requires_grad:
            gw = np.einsum("bol,bkl->ok", g2, cols, optimize=True).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward, "conv2d")


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel normalization; updates running stats in place when training."""
    axes = (0, 2, 3)
    if training:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            gx = (inv[None, :, None, None] / m) * (
                m * dxhat
                - dxhat.sum(axis=axes)[None, :, None, None]
                - xhat * (dxhat * xhat).sum(axis=axes)[None, :, None, None]
            )
        else:
            gx = dxhat * inv[None, :, None, None]
        return gx, gg, gbeta

    return Tensor._make(out.astype(x.dtype), (x, gamma, beta), backward, "batch_norm")


def maxpool2d(x, kernel, stride=None, padding=0):
    stride = kernel if stride is None else stride
    if kernel < 1:
        raise ContractError(f"maxpool kernel must be >= 1, got {kernel}")
    if padding > kernel // 2:
        raise ContractError(f"maxpool padding {padding} too large for kernel {kernel}")
    h, w = x.shape[2], x.shape[3]
    if h + 2 * padding < kernel or w + 2 * padding < kernel:
        raise ContractError(f"maxpool window {kernel} larger than padded input {h}x{w} (pad {padding})")
    out, idx = kernels.maxpool_forward(x.data, kernel, stride, padding)

    def backward(g):
        return (kernels.maxpool_backward(g, idx, x.shape),)

    return Tensor._make(out, (x,), backward, "maxpool2d")


@lru_cache(maxsize=256)
def _interp_matrix(n_in, n_out, align_corners, dtype):
    a = np.zeros((n_out, n_in), dtype=np.float64)
    for o in range(n_out):
        if align_corners:
            src = 0.0 if n_out == 1 else o * (n_in - 1) / (n_out - 1)
        else:
            src = max((o + 0.5) * n_in / n_out - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        a[o, i0] += 1.0 - lam
        a[o, i1] += lam
    a = a.astype(dtype)
    a.setflags(write=False)
    return a


def upsample_bilinear(x, out_h, out_w, align_corners=None):
    """Bilinear resize of the two trailing axes; also used for downsizing."""
    if out_h < 1 or out_w < 1:
        raise ContractError(f"upsample target must be >= 1, got {out_h}x{out_w}")
    align = ALIGN_CORNERS if align_corners is None else align_corners
    h, w = x.shape[-2], x.shape[-1]
    if (h, w) == (out_h, out_w):
        return x
    ah = _interp_matrix(h, out_h, align, np.dtype(x.dtype).str)
    aw = _interp_matrix(w, out_w, align, np.dtype(x.dtype).str)
    out = ah @ x.data @ aw.T

    def backward(g):
        return (ah.T @ g @ aw,)

    return Tensor._make(out, (x,), backward, "upsample_bilinear")


# ------------------------------------------------------------ region grids

def partition(n, k):
    """Start offsets of ``k`` floor-sized regions over ``n``; the last absorbs the remainder."""
    if k < 1 or k > n:
        raise ContractError(f"cannot partition extent {n} into k={k} regions")
    return np.arange(k, dtype=np.int64) * (n // k)


def region_index(n, k):
    starts = partition(n, k)
    return np.repeat(np.arange(k, dtype=np.int64), np.diff(np.append(starts, n)))


def region_expand(e, h, w):
    """Broadcast per-region scores (B, k, k) onto an (H, W) plane -> (B, 1, H, W)."""
    k = e.shape[-1]
    if e.ndim != 3 or e.shape[1] != k:
        raise ContractError(f"region grid must be (B, k, k), got {e.shape}")
    rows, cols = region_index(h, k), region_index(w, k)
    rs, cs = partition(h, k), partition(w, k)

    def backward(g):
        return (kernels.region_reduce(g, rs, cs),)

    return Tensor._make(kernels.region_expand(e.data, rows, cols), (e,), backward, "region_expand")


# -------------------------------------------------------------------- loss

def bce_with_logits(logits, target):
    """Mean binary cross-entropy on logits in log-sum-exp form."""
    x = logits.data
    y = np.asarray(target, dtype=x.dtype)
    if y.shape != x.shape:
        raise ContractError(f"bce shape mismatch: logits {x.shape} vs target {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ContractError("bce target must be binary {0, 1}")
    per = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = x.size

    def backward(g):
        e = np.exp(-np.abs(x))
        p = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return ((g * (p - y) / n).astype(x.dtype),)

    return Tensor._make(np.asarray(per.mean(), dtype=x.dtype), (logits,), backward, "bce")
