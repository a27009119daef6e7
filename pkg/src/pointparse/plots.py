"""Matplotlib renderings of the distance reports and training curves."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .triplet import DistanceStats


def render_distance_histograms(stats_by_epoch: dict[int, "DistanceStats"], path, bins: int = 40,
                               max_panels: int = 4) -> None:
    """Panel per selected epoch with overlaid positive/negative histograms."""
    epochs = [e for e in sorted(stats_by_epoch) if stats_by_epoch[e].pair_count > 0]
    if not epochs:
        raise ValueError("no pair distances to plot")
    if len(epochs) > max_panels:
        picks = np.linspace(0, len(epochs) - 1, max_panels).round().astype(int)
        epochs = [epochs[i] for i in sorted(set(picks))]

    ncols = min(2, len(epochs))
    nrows = math.ceil(len(epochs) / ncols)
    fig, axes = plt.subplots(nrows, ncols, figsize=(5.5 * ncols, 3.6 * nrows), squeeze=False)
    for ax, epoch in zip(axes.ravel(), epochs):
        stats = stats_by_epoch[epoch]
        edges, pos_counts, neg_counts = stats.histogram(bins)
        centers = 0.5 * (edges[:-1] + edges[1:])
        width = edges[1] - edges[0]
        ax.bar(centers, pos_counts, width=width, alpha=0.6, label="same class", color="tab:blue")
        ax.bar(centers, neg_counts, width=width, alpha=0.6, label="different class", color="tab:red")
        ax.set_title(f"epoch {epoch}")
        ax.set_xlabel("pair distance")
        ax.set_ylabel("pairs")
        ax.legend()
    for ax in axes.ravel()[len(epochs):]:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_distance_means(stats_by_epoch: dict[int, "DistanceStats"], path) -> None:
    """Mean same-class and different-class pair distance per epoch."""
    epochs = [e for e in sorted(stats_by_epoch) if stats_by_epoch[e].pair_count > 0]
    if not epochs:
        raise ValueError("no pair distances to plot")
    pos = [stats_by_epoch[e].mean_pos for e in epochs]
    neg = [stats_by_epoch[e].mean_neg for e in epochs]
    fig, ax = plt.subplots(figsize=(6.5, 4.0))
    ax.plot(epochs, pos, marker="o", label="mean same-class distance", color="tab:blue")
    ax.plot(epochs, neg, marker="s", label="mean different-class distance", color="tab:red")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean pair distance")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_training_curves(rows: list[dict], path) -> None:
    """Loss components and eval metrics over epochs from a training log."""
    if not rows:
        raise ValueError("empty training log")
    epochs = [int(float(r["epoch"])) for r in rows]

    def series(name):
        return [float(r[name]) if r[name] not in ("", "nan") else float("nan") for r in rows]

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 4.0))
    ax1.plot(epochs, series("ce_loss"), label="point CE", color="tab:green")
    ax1.plot(epochs, series("pdml_loss"), label="metric loss", color="tab:purple")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax1.grid(alpha=0.3)
    ax2.plot(epochs, series("miou"), label="mIoU", color="tab:blue")
    ax2.plot(epochs, series("pixel_acc"), label="pixel accuracy", color="tab:orange")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("metric")
    ax2.set_ylim(0, 1)
    ax2.legend()
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
