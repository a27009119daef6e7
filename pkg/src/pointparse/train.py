"""End-to-end training: point CE, cross-image metric loss, online extension.

Training runs in three phases over a fixed epoch budget: point supervision
alone, then with the cross-image metric loss, then additionally with online
label extension feeding the CE term. The optimizer is SGD with momentum,
weight decay, and polynomial learning-rate decay; classifier parameters get
a larger learning rate than feature-extractor parameters.

All randomness (epoch shuffles, crops) derives from the config seed, so a
single-threaded run is bit-reproducible.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .evalmetrics import ConfusionMatrix, miou, pixel_accuracy
from .extend import extend_labels, merge_points, region_candidates, score_candidates
from .grids import Dataset, ImageGrid, PointAnnotationSet, PseudoMask, Sample, class_set, points_to_pseudo_mask
from .net import ModelParams, NetConfig, accumulate, backward, forward, init_params
from .pointce import point_cross_entropy
from .triplet import DistanceStats, EmbeddingSet, LossConfig, extract_embeddings, subgroup_loss


class TrainingDivergedError(RuntimeError):
    """A loss or gradient went non-finite; training aborts loudly."""


@dataclass(frozen=True)
class TrainConfig:
    max_epoch: int = 60
    phases: tuple[int, int, int] = (4, 48, 8)
    batch_size: int = 16
    subgroup_size: int = 4
    crop_size: int | None = None
    base_lr: float = 0.02
    classifier_lr_multiplier: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_power: float = 0.8
    loss: LossConfig = LossConfig()
    metric_weight: float = 1.0
    extension_thr: float = 0.7
    argmax_within_set: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "phases", tuple(self.phases))
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if any(p < 0 for p in self.phases) or sum(self.phases) != self.max_epoch:
            raise ValueError(f"phases {self.phases} must be nonnegative and sum to max_epoch")
        if self.subgroup_size < 2:
            raise ValueError("subgroup_size must be >= 2")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def phase_of(self, epoch: int) -> int:
        a, b, _ = self.phases
        if epoch < a:
            return 1
        if epoch < a + b:
            return 2
        return 3


@dataclass
class OptimizerState:
    """Momentum velocity buffers, one per parameter array."""

    velocity: ModelParams

    @staticmethod
    def zeros(params: ModelParams) -> "OptimizerState":
        return OptimizerState(params.zeros_like())


def poly_lr(base: float, epoch: int, max_epoch: int, power: float) -> float:
    """base * (1 - epoch / max_epoch) ** power"""
    if epoch < 0 or epoch > max_epoch:
        raise ValueError(f"epoch {epoch} outside [0, {max_epoch}]")
    return base * (1.0 - epoch / max_epoch) ** power


def sgd_step(
    params: ModelParams,
    grads: ModelParams,
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
) -> tuple[ModelParams, OptimizerState]:
    """v <- momentum * v + grad + wd * p ; p <- p - lr_eff * v, in place.

    Classifier arrays use lr * classifier_lr_multiplier.
    """
    for g in grads.arrays():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError("non-finite gradient encountered")
    groups = (
        (params.feature_arrays(), grads.feature_arrays(), state.velocity.feature_arrays(), lr),
        (params.head_arrays(), grads.head_arrays(), state.velocity.head_arrays(),
         lr * cfg.classifier_lr_multiplier),
    )
    for p_arrs, g_arrs, v_arrs, lr_eff in groups:
        for p, g, v in zip(p_arrs, g_arrs, v_arrs):
            v *= cfg.momentum
            v += g + cfg.weight_decay * p
            p -= lr_eff * v
    return params, state


def _chunk_with_merge(items: list, size: int) -> list[list]:
    """Consecutive chunks; a trailing chunk of one merges into the previous."""
    chunks = [list(items[i:i + size]) for i in range(0, len(items), size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2].extend(chunks.pop())
    return chunks


def make_subgroups(order: Sequence, size: int, seed: int) -> list[list]:
    """Seeded shuffle of the dataset order, then consecutive chunks of `size`."""
    if size < 2:
        raise ValueError("subgroup size must be >= 2")
    if len(order) < 2:
        raise ValueError("need at least 2 images to form subgroups")
    rng = np.random.default_rng(seed)
    shuffled = [order[i] for i in rng.permutation(len(order))]
    return _chunk_with_merge(shuffled, size)


def crop_sample(
    sample: Sample, size: int | None, rng: np.random.Generator,
) -> tuple[ImageGrid, PointAnnotationSet, PseudoMask]:
    """Random square crop; annotated points outside the window are dropped."""
    h, w = sample.image.height, sample.image.width
    if size is None or (size >= h and size >= w):
        return sample.image, sample.points, sample.point_mask
    ch, cw = min(size, h), min(size, w)
    r0 = int(rng.integers(0, h - ch + 1))
    c0 = int(rng.integers(0, w - cw + 1))
    image = ImageGrid(sample.image.values[r0:r0 + ch, c0:c0 + cw])
    pts = tuple(
        (r - r0, c - c0, k)
        for r, c, k in sample.points.points
        if r0 <= r < r0 + ch and c0 <= c < c0 + cw
    )
    points = PointAnnotationSet(pts, image_id=sample.points.image_id)
    return image, points, points_to_pseudo_mask(points, ch, cw)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    ce_loss: float
    pdml_loss: float
    triples: int
    mean_pos_dist: float
    mean_neg_dist: float
    miou: float
    pixel_acc: float

    FIELDS = ("epoch", "lr", "ce_loss", "pdml_loss", "triples",
              "mean_pos_dist", "mean_neg_dist", "miou", "pixel_acc")

    def row(self) -> list:
        return [getattr(self, name) for name in self.FIELDS]


@dataclass
class TrainResult:
    params: ModelParams
    net_cfg: NetConfig
    logs: list[EpochLog]
    distances: dict[int, DistanceStats]  # epoch -> stats for that epoch


def predict(image: ImageGrid, params: ModelParams) -> np.ndarray:
    """Per-pixel argmax class map."""
    return forward(image, params).probs.argmax(axis=2)


def evaluate(params: ModelParams, dataset: Dataset) -> tuple[float, float, ConfusionMatrix | None]:
    """mIoU and pixel accuracy against dense ground truth masks."""
    cm = ConfusionMatrix(dataset.num_classes)
    seen = False
    for sample in dataset:
        if sample.gt_mask is None:
            continue
        cm.accumulate(predict(sample.image, params), sample.gt_mask)
        seen = True
    if not seen:
        return float("nan"), float("nan"), None
    return miou(cm), pixel_accuracy(cm), cm


def _extended_mask(
    probs: np.ndarray,
    points: PointAnnotationSet,
    point_mask: PseudoMask,
    cfg: TrainConfig,
) -> PseudoMask:
    """Regenerate extension labels from the current scores, keeping the points."""
    cset = class_set(point_mask)
    score_mask = score_candidates(probs, cset, cfg.extension_thr, cfg.argmax_within_set)
    region_mask = region_candidates(points, point_mask.height, point_mask.width)
    return merge_points(extend_labels(score_mask, region_mask), point_mask)


def train(
    dataset: Dataset,
    net_cfg: NetConfig,
    cfg: TrainConfig,
    eval_dataset: Dataset | None = None,
) -> TrainResult:
    """Run the full phase schedule and return final parameters plus logs."""
    if len(dataset) < 1:
        raise ValueError("empty training dataset")
    params = init_params(net_cfg)
    opt = OptimizerState.zeros(params)
    logs: list[EpochLog] = []
    distances: dict[int, DistanceStats] = {}

    n = len(dataset)
    for epoch in range(cfg.max_epoch):
        lr = poly_lr(cfg.base_lr, epoch, cfg.max_epoch, cfg.lr_power)
        phase = cfg.phase_of(epoch)
        shuffle_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, epoch, 0)))
        crop_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, epoch, 1)))
        order = list(shuffle_rng.permutation(n)) if n > 1 else [0]

        stats = DistanceStats()
        ce_losses: list[float] = []
        pdml_total, pdml_count = 0.0, 0

        for b0 in range(0, n, cfg.batch_size):
            batch = order[b0:b0 + cfg.batch_size]
            crops = [crop_sample(dataset.samples[i], cfg.crop_size, crop_rng) for i in batch]
            states = [forward(img, params) for img, _, _ in crops]

            # Metric loss over subgroups of the batch (already shuffled).
            emb_grads: list[np.ndarray | None] = [None] * len(batch)
            batch_triples = 0
            batch_metric_total = 0.0
            if phase >= 2 and len(batch) >= 2:
                positions = list(range(len(batch)))
                for group in _chunk_with_merge(positions, cfg.subgroup_size):
                    if len(group) < 2:
                        continue
                    sets = []
                    for pos in group:
                        _, points, _ = crops[pos]
                        sets.append(extract_embeddings(states[pos].embeddings, points))
                    res = subgroup_loss(sets, cfg.loss)
                    if res.triple_count == 0:
                        continue
                    batch_metric_total += res.total_loss
                    batch_triples += res.triple_count
                    stats.add(res.pos_distances, res.neg_distances)
                    for gi, pos in enumerate(group):
                        g = res.grads[sets[gi].image_id]
                        if g.size == 0:
                            continue
                        _, points, _ = crops[pos]
                        d_emb = np.zeros_like(states[pos].embeddings)
                        for (r, c, _), vec in zip(points.points, g):
                            d_emb[r, c] += vec
                        emb_grads[pos] = d_emb if emb_grads[pos] is None else emb_grads[pos] + d_emb

            # Cross-entropy over point labels, extended in phase 3.
            ce_results: list = [None] * len(batch)
            for pos, (img, points, pmask) in enumerate(crops):
                mask = pmask
                if phase >= 3 and pmask.annotated_count > 0:
                    mask = _extended_mask(states[pos].probs, points, pmask, cfg)
                if mask.annotated_count == 0:
                    continue
                ce_results[pos] = point_cross_entropy(states[pos].probs, mask)

            n_ce = sum(1 for r in ce_results if r is not None)
            batch_ce = (
                sum(r.loss for r in ce_results if r is not None) / n_ce if n_ce else 0.0
            )
            batch_metric = batch_metric_total / batch_triples if batch_triples else 0.0
            total = batch_ce + cfg.metric_weight * batch_metric
            if not math.isfinite(total):
                raise TrainingDivergedError(f"non-finite loss {total} at epoch {epoch}")
            if n_ce:
                ce_losses.extend(r.loss for r in ce_results if r is not None)
            pdml_total += batch_metric_total
            pdml_count += batch_triples

            grads = params.zeros_like()
            metric_scale = cfg.metric_weight / batch_triples if batch_triples else 0.0
            for pos, state in enumerate(states):
                d_logits = ce_results[pos].d_logits / n_ce if ce_results[pos] is not None else None
                d_emb = emb_grads[pos] * metric_scale if emb_grads[pos] is not None else None
                if d_logits is None and d_emb is None:
                    continue
                accumulate(grads, backward(state, params, d_emb, d_logits))
            sgd_step(params, grads, opt, lr, cfg)

        if phase >= 2:
            distances[epoch] = stats
        ev_miou, ev_acc = float("nan"), float("nan")
        if eval_dataset is not None:
            ev_miou, ev_acc, _ = evaluate(params, eval_dataset)
        logs.append(EpochLog(
            epoch=epoch,
            lr=lr,
            ce_loss=float(np.mean(ce_losses)) if ce_losses else float("nan"),
            pdml_loss=pdml_total / pdml_count if pdml_count else float("nan"),
            triples=pdml_count,
            mean_pos_dist=stats.mean_pos,
            mean_neg_dist=stats.mean_neg,
            miou=ev_miou,
            pixel_acc=ev_acc,
        ))
    return TrainResult(params, net_cfg, logs, distances)


def write_train_log(logs: list[EpochLog], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EpochLog.FIELDS)
        for log in logs:
            writer.writerow(log.row())


def write_pair_distances(distances: dict[int, DistanceStats], path) -> None:
    """Raw per-epoch pair distances: epoch,kind,distance."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "kind", "distance"])
        for epoch in sorted(distances):
            stats = distances[epoch]
            for d in stats.pos:
                writer.writerow([epoch, "+", f"{d:.6g}"])
            for d in stats.neg:
                writer.writerow([epoch, "-", f"{d:.6g}"])
