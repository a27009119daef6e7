"""Command-line entry point: gen-data, train, eval, extend, hist.

Exit codes: 0 success, 1 usage error, 2 runtime error. Every run echoes its
resolved configuration so any result can be reproduced from the log header.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .evalmetrics import per_class_iou
from .extend import (
    extend_labels,
    extension_accuracy,
    kmeans_extension,
    region_candidates,
    score_candidates,
)
from .grids import IGNORE, class_set, load_dataset, save_mask
from .net import NetConfig, forward, load_checkpoint, save_checkpoint
from .plots import render_distance_histograms, render_distance_means, render_training_curves
from .synth import SceneConfig, write_dataset
from .train import TrainConfig, evaluate, train, write_pair_distances, write_train_log
from .triplet import DistanceStats, LossConfig, write_histogram_csv, write_summary_csv

DISTANCES_NAME = "pair_distances.csv"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that signals usage errors instead of exiting with code 2."""

    def error(self, message):
        raise UsageError(message)


def _echo_config(name: str, args: argparse.Namespace) -> None:
    pairs = " ".join(f"{k}={v}" for k, v in sorted(vars(args).items()) if k != "func")
    print(f"[{name}] config: {pairs}")


def _parse_phases(text: str, epochs: int) -> tuple[int, int, int]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise UsageError(f"--phases wants three comma-separated ints, got {text!r}")
    a, b, c = (int(p) for p in parts)
    if a + b + c != epochs:
        raise UsageError(f"--phases {text} must sum to --epochs {epochs}")
    return a, b, c


def build_parser() -> _Parser:
    parser = _Parser(prog="pointparse", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"pointparse {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gen-data", parents=[], help="generate a synthetic dataset",
                       description="Write synthetic scenes, point files, masks, and a manifest.")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, required=True, help="number of scenes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--shapes", default="2,4", help="min,max shapes per scene")
    p.add_argument("--shape-size", default="8,18", help="min,max shape extent in pixels")
    p.add_argument("--start", type=int, default=0, help="first scene index")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a manifest dataset")
    p.add_argument("--data", required=True, help="training manifest")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--eval-data", default=None, help="held-out manifest for per-epoch metrics")
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--subgroup", type=int, default=4)
    p.add_argument("--crop", type=int, default=None)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--wd", type=float, default=0.0005)
    p.add_argument("--power", type=float, default=0.8)
    p.add_argument("--alpha", type=float, default=0.8)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--margin", type=float, default=20.0)
    p.add_argument("--lambda", dest="metric_weight", type=float, default=1.0,
                   help="weight of the metric loss relative to CE")
    p.add_argument("--thr", type=float, default=0.7, help="extension score threshold")
    p.add_argument("--phases", default=None, help="a,b,c epochs per phase (default 'all CE+metric')")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", default=None, help="write per-epoch metrics CSV here")
    p.add_argument("--hidden", default="8,16", help="hidden conv channels")
    p.add_argument("--dim", type=int, default=16, help="embedding dimension")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint against dense ground truth")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--per-class", default=None, help="write per-class IoU CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("extend", help="write extended masks and an accuracy report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--thr", type=float, default=0.7)
    p.add_argument("--method", choices=("both", "score", "region", "kmeans"), default="both")
    p.add_argument("--kmeans-iter", type=int, default=300)
    p.set_defaults(func=cmd_extend)

    p = sub.add_parser("hist", help="distance histograms, summaries, and figures from a log dir")
    p.add_argument("--log-dir", required=True, help=f"directory containing {DISTANCES_NAME}")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--bins", type=int, default=40)
    p.set_defaults(func=cmd_hist)
    return parser


def cmd_gen_data(args) -> int:
    shapes = tuple(int(x) for x in args.shapes.split(","))
    size = tuple(int(x) for x in args.shape_size.split(","))
    if len(shapes) != 2 or len(size) != 2:
        raise UsageError("--shapes and --shape-size want 'min,max'")
    cfg = SceneConfig(
        height=args.height, width=args.width, num_classes=args.classes,
        shapes_per_image=shapes, noise_std=args.noise, seed=args.seed,
        shape_size=size,
    )
    manifest = write_dataset(args.out, cfg, args.count, start=args.start)
    print(f"wrote {args.count} scenes; manifest at {manifest}")
    return 0


def cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    eval_dataset = load_dataset(args.eval_data) if args.eval_data else None
    phases = _parse_phases(args.phases, args.epochs) if args.phases else (0, args.epochs, 0)
    hidden = tuple(int(x) for x in args.hidden.split(",") if x.strip())
    net_cfg = NetConfig(
        in_channels=dataset.samples[0].image.channels if dataset.samples else 3,
        hidden_channels=hidden, embedding_dim=args.dim,
        num_classes=dataset.num_classes, seed=args.seed,
    )
    cfg = TrainConfig(
        max_epoch=args.epochs, phases=phases, batch_size=args.batch,
        subgroup_size=args.subgroup, crop_size=args.crop, base_lr=args.lr,
        momentum=args.momentum, weight_decay=args.wd, lr_power=args.power,
        loss=LossConfig(margin=args.margin, alpha=args.alpha, beta=args.beta),
        metric_weight=args.metric_weight, extension_thr=args.thr, seed=args.seed,
    )
    result = train(dataset, net_cfg, cfg, eval_dataset=eval_dataset)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.params, net_cfg, args.out)
    print(f"saved checkpoint to {args.out}")
    if args.log:
        log_path = Path(args.log)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        write_train_log(result.logs, log_path)
        write_pair_distances(result.distances, log_path.parent / DISTANCES_NAME)
        print(f"wrote {log_path} and {log_path.parent / DISTANCES_NAME}")
    final = result.logs[-1]
    print(f"final epoch: ce={final.ce_loss:.4f} metric={final.pdml_loss:.4f} "
          f"miou={final.miou:.4f} pixel_acc={final.pixel_acc:.4f}")
    return 0


def cmd_eval(args) -> int:
    params, _ = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    ev_miou, ev_acc, cm = evaluate(params, dataset)
    if cm is None:
        print("dataset has no ground-truth masks", file=sys.stderr)
        return 2
    print(f"miou,pixel_acc\n{ev_miou:.6f},{ev_acc:.6f}")
    if args.per_class:
        ious = per_class_iou(cm)
        with open(args.per_class, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "iou"])
            for k, v in enumerate(ious):
                writer.writerow([k, "" if np.isnan(v) else f"{v:.6f}"])
        print(f"wrote per-class IoU to {args.per_class}")
    return 0


def cmd_extend(args) -> int:
    params, _ = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    out = Path(args.out)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for sample in dataset:
        state = forward(sample.image, params)
        if args.method == "kmeans":
            ext = kmeans_extension(state.embeddings, sample.points, max_iter=args.kmeans_iter)
        else:
            cset = class_set(sample.point_mask)
            score = score_candidates(state.probs, cset, args.thr)
            region = region_candidates(sample.points, sample.image.height, sample.image.width)
            ext = {"both": lambda: extend_labels(score, region),
                   "score": lambda: score,
                   "region": lambda: region}[args.method]()
        save_mask(ext, out / "masks" / f"{sample.image_id}.pgm")
        labeled = int((ext.labels != IGNORE).sum())
        acc = ""
        if sample.gt_mask is not None and labeled:
            acc = f"{extension_accuracy(ext, sample.gt_mask):.6f}"
        rows.append([sample.image_id, labeled, acc])
    report = out / "extension_report.csv"
    with open(report, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "labeled_pixels", "accuracy"])
        writer.writerows(rows)
    print(f"wrote {len(rows)} masks and {report}")
    return 0


def _load_distances(path) -> dict[int, DistanceStats]:
    stats: dict[int, DistanceStats] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            epoch = int(row["epoch"])
            stats.setdefault(epoch, DistanceStats())
            if row["kind"] == "+":
                stats[epoch].pos.append(float(row["distance"]))
            else:
                stats[epoch].neg.append(float(row["distance"]))
    return stats


def cmd_hist(args) -> int:
    log_dir = Path(args.log_dir)
    distances_path = log_dir / DISTANCES_NAME
    if not distances_path.exists():
        print(f"no {DISTANCES_NAME} in {log_dir}", file=sys.stderr)
        return 2
    stats = _load_distances(distances_path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_histogram_csv(stats, out / "distance_histograms.csv", bins=args.bins)
    write_summary_csv(stats, out / "distance_summary.csv")
    render_distance_histograms(stats, out / "distance_histograms.png", bins=args.bins)
    render_distance_means(stats, out / "distance_means.png")
    written = ["distance_histograms.csv", "distance_summary.csv",
               "distance_histograms.png", "distance_means.png"]

    log_csvs = sorted(p for p in log_dir.glob("*.csv") if p.name != DISTANCES_NAME)
    for candidate in log_csvs:
        with open(candidate, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if rows and "ce_loss" in rows[0]:
            render_training_curves(rows, out / "training_curves.png")
            written.append("training_curves.png")
            break
    print(f"wrote {', '.join(written)} to {out}")
    return 0


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        if not argv:
            parser.print_usage(sys.stderr)
            return 1
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return 1
        _echo_config(args.command, args)
        return args.func(args)
    except UsageError as exc:
        print(f"pointparse: error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:
        # argparse exits itself for --help/--version; propagate its code.
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"pointparse: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))
