"""Siamese backbone, top-down pyramid fusion and the channel swap."""

import math
from fractions import Fraction

import numpy as np

from . import ops
from .config import STAGE_STRIDES
from .nn import Conv, ConvSeq, Module
from .tensor import ContractError, Tensor


def swap_indices(channels, ratio, layout="leading"):
    """Channel indices exchanged by :func:`channel_swap`."""
    n = math.floor(Fraction(ratio) * channels)
    if layout == "leading":
        return np.arange(n)
    if layout == "interleaved":
        return np.floor(np.arange(n) * channels / max(n, 1)).astype(np.int64)
    raise ContractError(f"unknown swap layout {layout!r}")


def channel_swap(fx, fy, ratio, layout="leading"):
    """Exchange floor(ratio * C) channels between two same-shape tensors.

    Parameter-free; applying it twice with the same ratio is the identity.
    """
    if fx.shape != fy.shape:
        raise ContractError(f"channel_swap shape mismatch: {fx.shape} vs {fy.shape}")
    c = fx.shape[1]
    idx = swap_indices(c, ratio, layout)
    if len(idx) == 0:
        return fx, fy
    take = np.zeros((1, c, 1, 1), dtype=fx.dtype)
    take[0, idx] = 1
    keep = Tensor(1 - take)
    take = Tensor(take)
    return fx * keep + fy * take, fy * keep + fx * take


class Backbone(Module):
    """Five stages of two 3x3 conv+BN+ReLU followed by a stride-2 maxpool."""

    def __init__(self, widths, rng, dtype=np.float32):
        self.widths = tuple(widths)
        chans = (3,) + self.widths
        self.stages = [ConvSeq(chans[i], chans[i + 1], (3, 3), rng, dtype) for i in range(5)]

    def forward(self, x):
        if x.shape[2] % 32 or x.shape[3] % 32:
            raise ContractError(f"backbone input {x.shape[2]}x{x.shape[3]} is not divisible by 32")
        feats = []
        for stage in self.stages:
            x = ops.maxpool2d(stage(x), 2, 2)
            feats.append(x)
        return feats


class Encoder(Module):
    """Produces five channel-swapped feature pairs, finest level first."""

    def __init__(self, cfg, rng, dtype=np.float32):
        d = cfg.fpn_width
        self.cfg = cfg
        self.backbone = Backbone(cfg.stage_widths, rng, dtype)
        self.top = Conv(cfg.stage_widths[4], d, 1, rng, dtype=dtype)
        # index j fuses pyramid level j + 1
        self.fuse = [ConvSeq(cfg.stage_widths[j] + d, d, (3, 3), rng, dtype) for j in range(4)]

    def _swap(self, f, n):
        fx, fy = ops.split(f, [n, n], axis=0)
        return channel_swap(fx, fy, self.cfg.swap_ratio, self.cfg.swap_layout)

    def forward(self, x, y):
        """Return ``{level: (F_X, F_Y)}`` for levels 1..5."""
        if x.shape != y.shape:
            raise ContractError(f"image pair shape mismatch: {x.shape} vs {y.shape}")
        if x.shape[2] != x.shape[3]:
            raise ContractError(f"inputs must be square, got {x.shape[2]}x{x.shape[3]}")
        n = x.shape[0]
        # both temporal images share every weight; run them as one batch
        stages = self.backbone(ops.concat([x, y], axis=0))
        pyramid = {5: self._swap(self.top(stages[4]), n)}
        for level in (4, 3, 2, 1):
            lateral = stages[level - 1]
            above = ops.concat(list(pyramid[level + 1]), axis=0)
            above = ops.upsample_bilinear(above, lateral.shape[2], lateral.shape[3])
            f = self.fuse[level - 1](ops.concat([lateral, above], axis=1))
            pyramid[level] = self._swap(f, n)
        return pyramid


def level_sizes(input_size):
    return {i + 1: input_size // s for i, s in enumerate(STAGE_STRIDES)}
