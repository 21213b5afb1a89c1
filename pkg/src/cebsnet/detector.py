"""Coarse-to-fine decoder blocks, mask heads and the two-stage mask fusion."""

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .nn import Conv, Module
from .tensor import ContractError, Tensor


@dataclass
class MaskSet:
    """Single-channel change logits. ``levels[i]`` is M_i at level-i size."""

    levels: dict = field(default_factory=dict)
    initial: Tensor = None  # M-hat, level-3 size
    final: Tensor = None    # M, level-1 size

    def named(self):
        """The seven supervised maps in a fixed order."""
        out = [(f"M{i}", self.levels[i]) for i in (1, 2, 3, 4, 5)]
        out += [("Mhat", self.initial), ("M", self.final)]
        return out

    def supervision(self, size):
        """All seven maps bilinearly resized to the ground-truth resolution."""
        return [(name, ops.upsample_bilinear(m, size, size)) for name, m in self.named()]


class DecoderBlock(Module):
    def __init__(self, level, d, rng, dtype):
        self.level = level
        if level == 5:
            self.lateral = Conv(d, d, 1, rng, dtype=dtype)
        else:
            self.from_above = Conv(d, d, 1, rng, dtype=dtype)
            self.lateral = Conv(d, d, 1, rng, dtype=dtype)
            self.merge = Conv(d, d, 1, rng, dtype=dtype)

    def forward(self, pasca, above=None):
        if self.level == 5:
            return self.lateral(pasca)
        if above is None:
            raise ContractError(f"decoder level {self.level} needs the level {self.level + 1} output first")
        up = ops.upsample_bilinear(above, pasca.shape[2], pasca.shape[3])
        return self.merge(self.from_above(up) + self.lateral(pasca))


class MaskHead(Module):
    """3x3 conv+BN+ReLU, then a linear 1x1 conv to one logit channel."""

    def __init__(self, d, rng, dtype):
        self.hidden = Conv(d, d, 3, rng, dtype=dtype)
        self.logit = Conv(d, 1, 1, rng, norm=False, act=False, dtype=dtype)

    def forward(self, fdb):
        return self.logit(self.hidden(fdb))


class MaskFusion(Module):
    """Resize three maps to the finest participating size, concat, linear 1x1."""

    def __init__(self, rng, dtype):
        self.conv = Conv(3, 1, 1, rng, norm=False, act=False, dtype=dtype)

    def forward(self, maps):
        size = max(m.shape[2] for m in maps)
        maps = [ops.upsample_bilinear(m, size, size) for m in maps]
        return self.conv(ops.concat(maps, axis=1))


class Detector(Module):
    def __init__(self, d, rng, dtype=np.float32):
        self.blocks = [DecoderBlock(i, d, rng, dtype) for i in (1, 2, 3, 4, 5)]
        self.heads = [MaskHead(d, rng, dtype) for _ in range(5)]
        self.initial_fusion = MaskFusion(rng, dtype)
        self.final_fusion = MaskFusion(rng, dtype)

    def decode(self, level, pasca, decoded):
        """Compute F_DB at ``level`` given ``decoded`` (level -> F_DB) of deeper levels."""
        if level < 5 and level + 1 not in decoded:
            raise ContractError(f"decode level {level} before level {level + 1}")
        decoded[level] = self.blocks[level - 1](pasca, decoded.get(level + 1))
        return decoded[level]

    def mask(self, level, fdb):
        return self.heads[level - 1](fdb)

    def fuse_initial(self, m5, m4, m3):
        return self.initial_fusion([m5, m4, m3])

    def fuse_final(self, mhat, m2, m1):
        return self.final_fusion([mhat, m2, m1])
