"""Online label extension: score-threshold and 5x5-region candidates.

Candidate masks reuse the sparse-mask layout (class id or IGNORE per pixel).
The final extension keeps only pixels where the two candidate schemes agree
on the class, which biases toward precision: wrong extended pixels poison
the cross-entropy term far more than missing ones cost.
"""

from __future__ import annotations

import logging

import numpy as np

from .grids import IGNORE, PointAnnotationSet, PseudoMask

log = logging.getLogger(__name__)

# Candidates share the sparse-mask representation.
CandidateMask = PseudoMask

REGION_HALF = 2  # 5x5 square around each annotated pixel


def score_candidates(
    scores: np.ndarray,
    cset: set[int],
    thr: float,
    argmax_within_set: bool = False,
) -> CandidateMask:
    """Label pixels whose top class probability clears `thr`.

    By default the argmax runs over all classes and the winner must belong
    to the image's class set. With `argmax_within_set`, classes outside the
    set never compete: the max is taken over `cset` only.
    """
    scores = np.asarray(scores)
    h, w, k = scores.shape
    labels = np.full((h, w), IGNORE, dtype=np.int64)
    if not cset:
        log.warning("empty class set: score candidates are all IGNORE")
        return PseudoMask(labels)

    if argmax_within_set:
        members = np.array(sorted(cset))
        sub = scores[:, :, members]
        best = sub.argmax(axis=2)
        best_prob = np.take_along_axis(sub, best[:, :, None], axis=2)[:, :, 0]
        chosen = members[best]
        keep = best_prob > thr
    else:
        chosen = scores.argmax(axis=2)
        best_prob = np.take_along_axis(scores, chosen[:, :, None], axis=2)[:, :, 0]
        keep = (best_prob > thr) & np.isin(chosen, sorted(cset))
    labels[keep] = chosen[keep]
    return PseudoMask(labels)


def region_candidates(points: PointAnnotationSet, height: int, width: int) -> CandidateMask:
    """Label the 5x5 square around each point, clipped at borders.

    Pixels covered by squares of different classes are contested and stay
    IGNORE no matter how many squares of either class cover them later.
    """
    labels = np.full((height, width), IGNORE, dtype=np.int64)
    contested = np.zeros((height, width), dtype=bool)
    for r, c, k in points.points:
        if not (0 <= r < height and 0 <= c < width):
            raise ValueError(f"point ({r}, {c}) outside {height}x{width} grid")
        r0, r1 = max(r - REGION_HALF, 0), min(r + REGION_HALF + 1, height)
        c0, c1 = max(c - REGION_HALF, 0), min(c + REGION_HALF + 1, width)
        block = labels[r0:r1, c0:c1]
        clash = (block != IGNORE) & (block != k)
        contested[r0:r1, c0:c1] |= clash
        block[block == IGNORE] = k
    labels[contested] = IGNORE
    return PseudoMask(labels)


def extend_labels(score_mask: CandidateMask, region_mask: CandidateMask) -> CandidateMask:
    """Keep pixels both candidate masks label with the same class."""
    if score_mask.labels.shape != region_mask.labels.shape:
        raise ValueError("candidate masks must have identical dimensions")
    agree = (score_mask.labels == region_mask.labels) & (score_mask.labels != IGNORE)
    labels = np.where(agree, score_mask.labels, IGNORE)
    return PseudoMask(labels)


def merge_points(extended: CandidateMask, point_mask: PseudoMask) -> PseudoMask:
    """Overlay the original annotated points; they win any disagreement."""
    labels = extended.labels.copy()
    annotated = point_mask.labels != IGNORE
    labels[annotated] = point_mask.labels[annotated]
    return PseudoMask(labels)


def extension_accuracy(ext: CandidateMask, gt: PseudoMask) -> float:
    """Fraction of labeled extension pixels matching the dense ground truth."""
    if ext.labels.shape != gt.labels.shape:
        raise ValueError("extension and ground truth dims differ")
    labeled = ext.labels != IGNORE
    n = int(labeled.sum())
    if n == 0:
        raise ValueError("extension labeled zero pixels")
    return float((ext.labels[labeled] == gt.labels[labeled]).mean())


def kmeans_extension(emb_map: np.ndarray, points: PointAnnotationSet, max_iter: int = 300) -> CandidateMask:
    """Lloyd's algorithm on per-pixel embeddings, seeded at annotated pixels.

    Every pixel ends up labeled with the class of its final cluster center;
    empty clusters keep their previous center. Ties go to the lowest center
    index, so the assignment is deterministic.
    """
    if len(points) == 0:
        raise ValueError("need at least one annotated point")
    emb_map = np.asarray(emb_map, dtype=np.float64)
    h, w, d = emb_map.shape
    vectors = emb_map.reshape(-1, d)
    centers = np.array([emb_map[r, c] for r, c, _ in points.points])
    classes = np.array([k for _, _, k in points.points])

    assign = None
    for _ in range(max_iter):
        dists = ((vectors[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = dists.argmin(axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for i in range(len(centers)):
            member = vectors[assign == i]
            if len(member):
                centers[i] = member.mean(axis=0)
    labels = classes[assign].reshape(h, w)
    return PseudoMask(labels)
