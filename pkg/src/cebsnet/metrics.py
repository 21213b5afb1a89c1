"""Pixel confusion counts and the five change-detection scores.

Scores are micro-averaged: counts are accumulated over every evaluated pixel
first and the ratios are taken once at the end.

Zero denominators: precision is 1 when nothing was predicted positive and
nothing was missed (FN = 0), else 0; recall is symmetric (1 when there are no
positives and nothing was falsely flagged). F1 and IoU are 1 when neither mask
has any positive pixel.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import ContractError

NAMES = ("P", "R", "F1", "OA", "IoU")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class ScoreSet:
    P: float
    R: float
    F1: float
    OA: float
    IoU: float

    def as_dict(self):
        return {n: getattr(self, n) for n in NAMES}


def accumulate(pred, gt, acc=None):
    """Add the per-pixel outcomes of one binary prediction to ``acc``."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    if not (np.isin(pred, (0, 1)).all() and np.isin(gt, (0, 1)).all()):
        raise ContractError("accumulate expects binary {0, 1} masks")
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = p.size - tp - fp - fn
    step = ConfusionCounts(tp, tn, fp, fn)
    return step if acc is None else acc + step


def scores(c):
    if c.total <= 0:
        raise ContractError("cannot score empty confusion counts")
    tp, tn, fp, fn = c.tp, c.tn, c.fp, c.fn
    p = tp / (tp + fp) if tp + fp else (1.0 if fn == 0 else 0.0)
    r = tp / (tp + fn) if tp + fn else (1.0 if fp == 0 else 0.0)
    if tp + fp + fn == 0:
        f1 = iou = 1.0
    else:
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        iou = tp / (tp + fp + fn)
    oa = (tp + tn) / c.total
    return ScoreSet(p, r, f1, oa, iou)


def format_report(s, counts=None, title="CEBSNet"):
    """Aligned percent table plus ``metric=value`` lines (4 decimals, fractions)."""
    head = f"{'Method':<12}" + "".join(f"{n:>8}" for n in NAMES)
    row = f"{title:<12}" + "".join(f"{100 * getattr(s, n):>8.1f}" for n in NAMES)
    lines = [head, "-" * len(head), row, ""]
    lines += [f"{n}={getattr(s, n):.4f}" for n in NAMES]
    if counts is not None:
        lines += [f"TP={counts.tp}", f"TN={counts.tn}", f"FP={counts.fp}", f"FN={counts.fn}"]
    lines.append("# zero-denominator convention: empty prediction and empty ground truth score 1")
    return "\n".join(lines)
