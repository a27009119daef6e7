"""Point-wise cross-entropy over sparsely annotated masks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .grids import IGNORE, PseudoMask

# Probabilities are floored here before the log so the loss stays finite.
PROB_FLOOR = 1e-12


class EmptyMaskError(ValueError):
    """Mask has no annotated pixels, so the image contributes no CE term."""


@dataclass
class PointCEResult:
    loss: float
    d_logits: np.ndarray  # gradient w.r.t. classifier logits, zero at IGNORE pixels
    annotated: int


def point_cross_entropy(scores: np.ndarray, mask: PseudoMask) -> PointCEResult:
    """Mean negative log-probability over the annotated pixels.

    `scores` is the (H, W, K) probability map. The returned gradient is taken
    w.r.t. the logits that produced it: (softmax - onehot) / n at annotated
    pixels, zero elsewhere.
    """
    scores = np.asarray(scores)
    if scores.shape[:2] != mask.labels.shape:
        raise ValueError(f"score map {scores.shape[:2]} does not match mask {mask.labels.shape}")
    rows, cols = np.nonzero(mask.labels != IGNORE)
    n = rows.size
    if n == 0:
        raise EmptyMaskError("mask has no annotated pixels")
    labels = mask.labels[rows, cols]
    p_true = scores[rows, cols, labels]
    loss = float(-np.log(np.maximum(p_true, PROB_FLOOR)).mean())

    d_logits = np.zeros_like(scores)
    d_logits[rows, cols, :] = scores[rows, cols, :] / n
    d_logits[rows, cols, labels] -= 1.0 / n
    return PointCEResult(loss, d_logits, n)


def dataset_objective(scores_and_masks: Iterable[tuple[np.ndarray, PseudoMask]]) -> float:
    """Mean per-image point CE across a dataset."""
    losses = [point_cross_entropy(s, m).loss for s, m in scores_and_masks]
    if not losses:
        raise ValueError("empty dataset")
    return float(np.mean(losses))
