"""Cross-image triplet formation and the margin-based metric losses.

Annotated-pixel embeddings from different images are paired into
(anchor, positive, negative) triples: anchor and positive share a class,
the negative does not, and positive and negative come from one other image.
The loss pulls positive pairs together by their raw L2 distance and pushes
the negative-pair distance at least `margin` beyond the positive-pair one.

Distances are computed on raw, unnormalized embedding vectors.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .grids import PointAnnotationSet


@dataclass(frozen=True, eq=False)
class EmbeddingPoint:
    """Feature vector of one annotated pixel."""

    vector: np.ndarray
    class_id: int
    image_id: str
    pixel: tuple[int, int]

    def __post_init__(self):
        v = np.array(self.vector, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("embedding vector must be 1-D")
        if not np.all(np.isfinite(v)):
            raise ValueError("embedding vector must be finite")
        object.__setattr__(self, "vector", v)
        v.flags.writeable = False


@dataclass(frozen=True)
class EmbeddingSet:
    """Annotated-pixel embeddings of one image, in annotation order."""

    image_id: str
    points: tuple[EmbeddingPoint, ...]

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))
        for p in self.points:
            if p.image_id != self.image_id:
                raise ValueError(f"point from image {p.image_id!r} in set {self.image_id!r}")

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self):
        return iter(self.points)


@dataclass(frozen=True)
class Triple:
    anchor: EmbeddingPoint
    positive: EmbeddingPoint
    negative: EmbeddingPoint

    def __post_init__(self):
        if self.anchor.class_id != self.positive.class_id:
            raise ValueError("anchor and positive must share a class")
        if self.anchor.class_id == self.negative.class_id:
            raise ValueError("negative must differ in class from the anchor")
        if self.anchor.image_id == self.positive.image_id:
            raise ValueError("anchor and positive must come from different images")
        if self.positive.image_id != self.negative.image_id:
            raise ValueError("positive and negative must come from the same image")


@dataclass(frozen=True)
class LossConfig:
    """Hyperparameters of the metric loss: margin plus the two term weights."""

    margin: float = 20.0
    alpha: float = 0.8
    beta: float = 1.0

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")


def extract_embeddings(emb_map: np.ndarray, points: PointAnnotationSet, image_id: str | None = None) -> EmbeddingSet:
    """Gather the embedding vector at each annotated pixel, annotation order."""
    emb_map = np.asarray(emb_map)
    h, w = emb_map.shape[:2]
    image_id = points.image_id if image_id is None else image_id
    out = []
    for r, c, k in points.points:
        if not (0 <= r < h and 0 <= c < w):
            raise ValueError(f"point ({r}, {c}) outside {h}x{w} embedding map")
        out.append(EmbeddingPoint(emb_map[r, c], k, image_id, (r, c)))
    return EmbeddingSet(image_id, tuple(out))


def positive_loss(a: EmbeddingPoint, b: EmbeddingPoint) -> float:
    """Unsquared L2 distance between two same-class embeddings."""
    if a.class_id != b.class_id:
        raise ValueError("positive pair must share a class")
    return float(np.linalg.norm(a.vector - b.vector))


def negative_loss(a: EmbeddingPoint, pos: EmbeddingPoint, neg: EmbeddingPoint, margin: float) -> float:
    """Hinge on the distance gap: max(dis(+) - dis(-) + margin, 0)."""
    if a.class_id != pos.class_id or a.class_id == neg.class_id:
        raise ValueError("invalid class structure for a negative-pair loss")
    d_pos = np.linalg.norm(a.vector - pos.vector)
    d_neg = np.linalg.norm(a.vector - neg.vector)
    return float(max(d_pos - d_neg + margin, 0.0))


def _unit(diff: np.ndarray, dist: float) -> np.ndarray:
    # Subgradient of the norm at 0 is taken as the zero vector.
    if dist == 0.0:
        return np.zeros_like(diff)
    return diff / dist


@dataclass
class TripleLossResult:
    loss: float
    grad_anchor: np.ndarray
    grad_positive: np.ndarray
    grad_negative: np.ndarray
    pos_distance: float
    neg_distance: float


def triplet_loss(t: Triple, cfg: LossConfig) -> TripleLossResult:
    """Weighted sum of the pull and hinge terms, with per-vector gradients."""
    a, p, n = t.anchor.vector, t.positive.vector, t.negative.vector
    diff_p, diff_n = a - p, a - n
    d_pos = float(np.linalg.norm(diff_p))
    d_neg = float(np.linalg.norm(diff_n))
    hinge = d_pos - d_neg + cfg.margin
    active = hinge > 0.0

    loss = cfg.alpha * d_pos + cfg.beta * max(hinge, 0.0)
    u_pos = _unit(diff_p, d_pos)
    u_neg = _unit(diff_n, d_neg)

    ga = cfg.alpha * u_pos
    gp = -cfg.alpha * u_pos
    gn = np.zeros_like(a)
    if active:
        ga = ga + cfg.beta * (u_pos - u_neg)
        gp = gp - cfg.beta * u_pos
        gn = gn + cfg.beta * u_neg
    return TripleLossResult(float(loss), ga, gp, gn, d_pos, d_neg)


def form_triples(
    anchors: EmbeddingSet,
    others: EmbeddingSet,
    rng: np.random.Generator | None = None,
) -> list[Triple]:
    """Pair each anchor with positives and negatives from the other image.

    For every anchor, the other image's points split into same-class and
    different-class pools (kept in annotation order, or seeded-shuffled when
    `rng` is given); pairs are consumed one positive and one negative at a
    time until either pool empties, giving min(|pos|, |neg|) triples per
    anchor. Both images sharing no class yields no triples.
    """
    if anchors.image_id == others.image_id:
        raise ValueError("triples must span two distinct images")
    out = []
    for anchor in anchors:
        pos_pool = [p for p in others if p.class_id == anchor.class_id]
        neg_pool = [p for p in others if p.class_id != anchor.class_id]
        if rng is not None:
            pos_pool = [pos_pool[i] for i in rng.permutation(len(pos_pool))]
            neg_pool = [neg_pool[i] for i in rng.permutation(len(neg_pool))]
        for pos, neg in zip(pos_pool, neg_pool):
            out.append(Triple(anchor, pos, neg))
    return out


@dataclass
class SubgroupResult:
    """Loss, per-point gradients, and pair distances from one subgroup."""

    total_loss: float
    triple_count: int
    grads: dict[str, np.ndarray]  # image_id -> (n_points, D), gradient of total_loss
    pos_distances: list[float]
    neg_distances: list[float]

    @property
    def mean_loss(self) -> float:
        return self.total_loss / self.triple_count if self.triple_count else 0.0


def subgroup_loss(
    subgroup: Sequence[EmbeddingSet],
    cfg: LossConfig,
    rng: np.random.Generator | None = None,
) -> SubgroupResult:
    """Run every ordered image pair in the subgroup and sum triple losses.

    Returns the gradient of the summed loss per embedding point; callers
    dividing by `triple_count` get the gradient of the per-triple mean.
    A subgroup producing zero triples is valid and reported as such.
    """
    ids = [s.image_id for s in subgroup]
    if len(set(ids)) != len(ids):
        raise ValueError("subgroup image ids must be distinct")
    if len(subgroup) < 2:
        raise ValueError("subgroup needs at least 2 images")

    index = {
        (s.image_id, p.pixel): (s.image_id, i)
        for s in subgroup
        for i, p in enumerate(s.points)
    }
    grads = {
        s.image_id: np.zeros((len(s.points), s.points[0].vector.size if s.points else 0))
        for s in subgroup
    }
    total, count = 0.0, 0
    pos_d, neg_d = [], []
    for a_set in subgroup:
        for b_set in subgroup:
            if a_set.image_id == b_set.image_id:
                continue
            for t in form_triples(a_set, b_set, rng=rng):
                res = triplet_loss(t, cfg)
                total += res.loss
                count += 1
                pos_d.append(res.pos_distance)
                neg_d.append(res.neg_distance)
                for point, g in (
                    (t.anchor, res.grad_anchor),
                    (t.positive, res.grad_positive),
                    (t.negative, res.grad_negative),
                ):
                    img, i = index[(point.image_id, point.pixel)]
                    grads[img][i] += g
    return SubgroupResult(total, count, grads, pos_d, neg_d)


class DistanceStats:
    """Accumulates positive/negative pair distances for one epoch."""

    def __init__(self):
        self.pos: list[float] = []
        self.neg: list[float] = []

    def add(self, pos_distances, neg_distances):
        self.pos.extend(float(d) for d in pos_distances)
        self.neg.extend(float(d) for d in neg_distances)

    @property
    def pair_count(self) -> int:
        return len(self.pos) + len(self.neg)

    @property
    def mean_pos(self) -> float:
        return float(np.mean(self.pos)) if self.pos else float("nan")

    @property
    def mean_neg(self) -> float:
        return float(np.mean(self.neg)) if self.neg else float("nan")

    def histogram(self, bins: int = 40) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Fixed-width bins over [0, max observed]; returns (edges, pos, neg)."""
        if self.pair_count == 0:
            raise ValueError("no pairs observed")
        hi = max(self.pos + self.neg)
        if hi <= 0.0:
            hi = 1.0
        edges = np.linspace(0.0, hi, bins + 1)
        pos_counts, _ = np.histogram(self.pos, bins=edges)
        neg_counts, _ = np.histogram(self.neg, bins=edges)
        return edges, pos_counts, neg_counts


def write_histogram_csv(stats_by_epoch: dict[int, DistanceStats], path, bins: int = 40) -> None:
    """Per-epoch distance histograms: epoch,kind,bin_lo,bin_hi,count."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "kind", "bin_lo", "bin_hi", "count"])
        for epoch in sorted(stats_by_epoch):
            stats = stats_by_epoch[epoch]
            if stats.pair_count == 0:
                continue
            edges, pos_counts, neg_counts = stats.histogram(bins)
            for kind, counts in (("+", pos_counts), ("-", neg_counts)):
                for i, count in enumerate(counts):
                    writer.writerow([epoch, kind, f"{edges[i]:.6g}", f"{edges[i + 1]:.6g}", int(count)])


def write_summary_csv(stats_by_epoch: dict[int, DistanceStats], path) -> None:
    """Per-epoch mean pair distances: epoch,mean_pos,mean_neg."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_pos", "mean_neg"])
        for epoch in sorted(stats_by_epoch):
            stats = stats_by_epoch[epoch]
            if stats.pair_count == 0:
                continue
            writer.writerow([epoch, f"{stats.mean_pos:.6g}", f"{stats.mean_neg:.6g}"])
