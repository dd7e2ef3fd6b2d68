"""Confusion counts, overlap metrics, and the soft overlap loss.

All hard metrics reduce to the four confusion counts of a thresholded
prediction against a binary mask, so one counting pass serves every metric.
Ties at the threshold count as positive.  A metric whose denominator is
zero is defined as 1.0: an empty prediction against an empty mask is a
perfect score, not an error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError, ValidationError
from .tensor import Tensor

__all__ = ["ConfusionCounts", "confusion", "dice_score", "iou",
           "sensitivity_paper", "recall", "accuracy", "all_metrics",
           "dice_loss"]


@dataclass(frozen=True)
class ConfusionCounts:
    """Pixel counts of a binary prediction against a binary reference."""

    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


def _as_array(value) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def confusion(pred, mask, threshold: float = 0.5) -> ConfusionCounts:
    """Count tp/fp/tn/fn of ``pred >= threshold`` against a {0,1} mask."""
    p = _as_array(pred)
    m = _as_array(mask)
    if p.shape != m.shape:
        raise ShapeError("confusion: shapes differ", expected=p.shape, actual=m.shape)
    values = np.unique(m)
    if not np.isin(values, (0, 1)).all():
        raise ValidationError(f"mask must be binary, found values {values[:8]}")
    hard = p >= threshold
    truth = m >= 0.5
    tp = int(np.count_nonzero(hard & truth))
    fp = int(np.count_nonzero(hard & ~truth))
    fn = int(np.count_nonzero(~hard & truth))
    tn = int(hard.size - tp - fp - fn)
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def _ratio(numerator: int, denominator: int) -> float:
    return numerator / denominator if denominator else 1.0


def dice_score(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)


def iou(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp + c.fn)


def sensitivity_paper(c: ConfusionCounts) -> float:
    """TP / (TP + FP): the quantity reported as sensitivity upstream of this
    codebase; numerically it is precision.  Kept verbatim for comparability,
    alongside :func:`recall` for the conventional reading."""
    return _ratio(c.tp, c.tp + c.fp)


def recall(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn)


def accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise ValidationError("accuracy of zero pixels is undefined")
    return (c.tp + c.tn) / c.total


def all_metrics(c: ConfusionCounts) -> dict:
    return {
        "dice": dice_score(c),
        "iou": iou(c),
        "sensitivity_paper": sensitivity_paper(c),
        "recall": recall(c),
        "accuracy": accuracy(c),
    }


def dice_loss(pred: Tensor, mask: Tensor, smooth: float = 1.0) -> Tensor:
    """Soft overlap loss: one minus the smoothed dice of each sample,
    averaged over the batch.

    ``pred`` holds probabilities in [0, 1] with shape (N, 1, H, W); ``mask``
    matches it with {0, 1} values.  With ``smooth`` > 0 the loss is finite
    and differentiable even for empty masks.
    """
    if pred.shape != mask.shape:
        raise ShapeError("dice_loss: shapes differ", expected=pred.shape,
                         actual=mask.shape)
    if pred.ndim != 4:
        raise ShapeError("dice_loss expects (N,1,H,W)", expected=4, actual=pred.ndim)
    if smooth <= 0:
        raise ValidationError("smooth must be positive")
    axes = (1, 2, 3)
    intersection = T.mul(pred, mask).sum(axis=axes)
    totals = T.add(pred.sum(axis=axes), mask.sum(axis=axes))
    per_sample = T.div(T.add(T.scale(intersection, 2.0), smooth),
                       T.add(totals, smooth))
    mean = T.scale(per_sample.sum(), 1.0 / pred.shape[0])
    return T.add(1.0, T.scale(mean, -1.0))
