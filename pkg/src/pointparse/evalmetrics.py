"""Confusion-matrix evaluation: mean IoU and pixel accuracy."""

from __future__ import annotations

import numpy as np

from .grids import IGNORE, PseudoMask


class ConfusionMatrix:
    """K x K counts with ground truth on rows and predictions on columns."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ValueError("need at least one class")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred: np.ndarray, gt: PseudoMask) -> "ConfusionMatrix":
        """Add one image's pixel pairs; pixels with gt IGNORE are skipped."""
        pred = np.asarray(pred)
        if pred.shape != gt.labels.shape:
            raise ValueError(f"prediction {pred.shape} does not match ground truth {gt.labels.shape}")
        valid = gt.labels != IGNORE
        g = gt.labels[valid]
        p = pred[valid]
        if np.any((p < 0) | (p >= self.num_classes)) or np.any(g >= self.num_classes):
            raise ValueError("class id out of range")
        flat = g * self.num_classes + p
        self.counts += np.bincount(flat, minlength=self.num_classes ** 2).reshape(
            self.num_classes, self.num_classes)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge matrices of different sizes")
        self.counts += other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN where the class is absent from both gt and pred."""
    tp = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - np.diag(cm.counts)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / union, np.nan)


def miou(cm: ConfusionMatrix) -> float:
    """Mean IoU over classes that appear in gt or predictions."""
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    ious = per_class_iou(cm)
    return float(np.nanmean(ious))


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)
