"""Deep-supervision loss: binary cross-entropy on all seven change maps."""

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import ContractError


@dataclass
class LossReport:
    terms: dict   # name -> float, in MaskSet.named() order
    total: object  # Tensor scalar, differentiable

    @property
    def value(self):
        return float(self.total.data)


def bce(logits, gt):
    """Mean binary cross-entropy of sigmoid(logits) against a {0,1} mask."""
    gt = np.asarray(gt)
    if gt.shape != logits.shape:
        raise ContractError(f"bce shape mismatch: logits {logits.shape} vs gt {gt.shape}")
    return ops.bce_with_logits(logits, gt)


def total_loss(masks, gt):
    """Unit-weight sum of the seven per-map losses, each at ground-truth resolution.

    ``gt`` is (B, S, S) or (B, 1, S, S).
    """
    gt = np.asarray(gt)
    if gt.ndim == 3:
        gt = gt[:, None]
    size = gt.shape[-1]
    terms, total = {}, None
    for name, logits in masks.supervision(size):
        term = bce(logits, gt.astype(logits.dtype))
        terms[name] = float(term.data)
        total = term if total is None else total + term
    return LossReport(terms, total)
