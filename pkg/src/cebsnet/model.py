"""End-to-end change detection network."""

import numpy as np

from . import ops
from .config import ModelConfig
from .detector import Detector, MaskSet
from .encoder import Encoder
from .nn import Module
from .refine import LevelRefiner, Schedule, refine_level
from .tensor import ContractError, Tensor


class CEBSNet(Module):
    def __init__(self, cfg=None, seed=0):
        cfg = cfg or ModelConfig()
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(cfg.precision)
        rng = np.random.default_rng(seed)
        d = cfg.fpn_width
        ops.ALIGN_CORNERS = cfg.align_corners
        self.encoder = Encoder(cfg, rng, self.dtype)
        self.refiners = [LevelRefiner(i, d, rng, cfg.refine, self.dtype) for i in (1, 2, 3, 4, 5)]
        self.detector = Detector(d, rng, self.dtype)

    def _as_input(self, img):
        if not isinstance(img, Tensor):
            img = Tensor(np.asarray(img, dtype=self.dtype))
        if img.ndim != 4 or img.shape[1] != 3:
            raise ContractError(f"expected a (B, 3, S, S) image batch, got {img.shape}")
        return img

    def forward(self, x, y, trace=None):
        """Run both images through the network and return the :class:`MaskSet`.

        ``trace``, when a dict, receives per-level intermediate maps.
        """
        x, y = self._as_input(x), self._as_input(y)
        pyramid = self.encoder(x, y)
        schedule = Schedule()
        decoded, masks = {}, MaskSet()

        def run(level):
            level_trace = {} if trace is not None else None
            refine_level(self.refiners[level - 1], pyramid[level], schedule, level_trace)
            if trace is not None:
                trace[level] = level_trace

        def detect(level):
            fdb = self.detector.decode(level, schedule.pasca[level], decoded)
            masks.levels[level] = self.detector.mask(level, fdb)

        for level in (5, 4, 3):
            run(level)
        for level in (5, 4, 3):
            detect(level)
        masks.initial = self.detector.fuse_initial(masks.levels[5], masks.levels[4], masks.levels[3])
        schedule.mhat = masks.initial
        for level in (2, 1):
            run(level)
            detect(level)
        masks.final = self.detector.fuse_final(masks.initial, masks.levels[2], masks.levels[1])
        return masks

    def predict_proba(self, x, y):
        """Change probability at input resolution, shape (B, S, S). Runs in eval mode."""
        from .tensor import no_grad

        was_training = self.training
        self.eval()
        try:
            with no_grad():
                masks = self.forward(x, y)
                size = x.shape[-1]
                logit = ops.upsample_bilinear(masks.final, size, size).data[:, 0]
        finally:
            self.train(was_training)
        return ops.sigmoid(Tensor(logit)).data
