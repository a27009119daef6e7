"""Deterministic synthetic scene generator with dense ground truth.

Scenes are a class-0 background plus axis-aligned rectangles and ellipses of
classes 1..K-1, painted back-to-front, each class with a fixed mean color and
optional per-pixel Gaussian noise. Everything is a pure function of
(config, scene index), so regenerating a dataset is byte-identical on disk.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .grids import (
    Dataset,
    ImageGrid,
    PointAnnotationSet,
    PseudoMask,
    Sample,
    points_to_pseudo_mask,
    save_image,
    save_mask,
    save_points,
)

# 4-connectivity structuring element for instance components.
_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True)
class SceneConfig:
    height: int = 32
    width: int = 32
    num_classes: int = 6
    shapes_per_image: tuple[int, int] = (2, 4)
    noise_std: float = 0.05
    seed: int = 0
    channels: int = 3
    shape_size: tuple[int, int] = (8, 18)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        lo, hi = self.shapes_per_image
        if lo > hi or lo < 0:
            raise ValueError(f"empty shapes_per_image range {self.shapes_per_image}")
        slo, shi = self.shape_size
        if slo > shi or slo < 1:
            raise ValueError(f"empty shape_size range {self.shape_size}")
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise ValueError("height, width, channels must be >= 1")


def class_palette(num_classes: int, channels: int = 3) -> np.ndarray:
    """Fixed mean color per class, shape (num_classes, channels).

    Depends only on (num_classes, channels) so train and eval splits share
    one appearance model regardless of seeds. Hues are evenly spaced with
    alternating lightness; single-channel palettes are evenly spaced grays.
    """
    if channels == 1:
        levels = np.linspace(0.15, 0.9, num_classes)
        return levels.reshape(-1, 1)
    colors = np.zeros((num_classes, channels))
    for k in range(num_classes):
        hue = k / num_classes
        val = 0.85 if k % 2 == 0 else 0.55
        rgb = colorsys.hsv_to_rgb(hue, 0.6, val)
        colors[k, :3] = rgb[:channels]
    if channels > 3:
        # Extra channels repeat the rgb cycle, offset per class.
        for ch in range(3, channels):
            colors[:, ch] = colors[:, ch % 3]
    return colors


def generate_scene(cfg: SceneConfig, index: int) -> tuple[ImageGrid, PseudoMask]:
    """Render scene `index`: returns the image and its dense ground truth."""
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, index, 0)))
    labels = np.zeros((cfg.height, cfg.width), dtype=np.int64)

    lo, hi = cfg.shapes_per_image
    n_shapes = int(rng.integers(lo, hi + 1))
    for _ in range(n_shapes):
        k = int(rng.integers(1, cfg.num_classes))
        sh = int(rng.integers(cfg.shape_size[0], cfg.shape_size[1] + 1))
        sw = int(rng.integers(cfg.shape_size[0], cfg.shape_size[1] + 1))
        sh, sw = min(sh, cfg.height), min(sw, cfg.width)
        r0 = int(rng.integers(0, cfg.height - sh + 1))
        c0 = int(rng.integers(0, cfg.width - sw + 1))
        if rng.random() < 0.5:
            labels[r0:r0 + sh, c0:c0 + sw] = k
        else:
            rr, cc = np.mgrid[0:sh, 0:sw]
            ry, rx = (sh - 1) / 2.0, (sw - 1) / 2.0
            inside = ((rr - ry) / max(ry, 0.5)) ** 2 + ((cc - rx) / max(rx, 0.5)) ** 2 <= 1.0
            region = labels[r0:r0 + sh, c0:c0 + sw]
            region[inside] = k

    palette = class_palette(cfg.num_classes, cfg.channels)
    values = palette[labels]
    if cfg.noise_std > 0:
        values = values + rng.normal(0.0, cfg.noise_std, size=values.shape)
        values = np.clip(values, 0.0, 1.0)
    return ImageGrid(values), PseudoMask(labels)


def connected_components(labels: np.ndarray, class_id: int) -> list[np.ndarray]:
    """Pixel index arrays (n, 2) of the 4-connected components of one class."""
    comp, n = ndimage.label(labels == class_id, structure=_CROSS)
    return [np.argwhere(comp == i) for i in range(1, n + 1)]


def sample_point_annotations(gt: PseudoMask, rng_seed: int, image_id: str = "") -> PointAnnotationSet:
    """One point per 4-connected instance of each class, uniform within it.

    Emission order is classes ascending, components in scan order, so the
    annotation file order is reproducible.
    """
    if not gt.is_dense():
        raise ValueError("ground truth must be dense (no IGNORE pixels)")
    rng = np.random.default_rng(rng_seed)
    pts = []
    for k in sorted(np.unique(gt.labels)):
        for pixels in connected_components(gt.labels, int(k)):
            r, c = pixels[int(rng.integers(len(pixels)))]
            pts.append((int(r), int(c), int(k)))
    return PointAnnotationSet(tuple(pts), image_id=image_id)


def annotation_stats(dataset: Dataset) -> float:
    """Mean annotated pixel count per image."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    return float(np.mean([s.point_mask.annotated_count for s in dataset]))


def _point_seed(cfg: SceneConfig, index: int) -> int:
    return int(np.random.SeedSequence((cfg.seed, index, 1)).generate_state(1)[0])


def make_dataset(cfg: SceneConfig, count: int, start: int = 0) -> Dataset:
    """Generate `count` scenes (indices start..start+count-1) in memory."""
    samples = []
    for index in range(start, start + count):
        image, gt = generate_scene(cfg, index)
        image_id = f"scene_{index:04d}"
        points = sample_point_annotations(gt, _point_seed(cfg, index), image_id=image_id)
        mask = points_to_pseudo_mask(points, cfg.height, cfg.width)
        samples.append(Sample(image, points, mask, gt, image_id=image_id))
    return Dataset(tuple(samples), cfg.num_classes)


def write_dataset(out_dir, cfg: SceneConfig, count: int, start: int = 0) -> Path:
    """Write scenes, dense masks, and point files plus a manifest; returns its path."""
    out = Path(out_dir)
    for sub in ("images", "points", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    ext = "pgm" if cfg.channels == 1 else "ppm"
    lines = [f"# num_classes: {cfg.num_classes}"]
    for index in range(start, start + count):
        image, gt = generate_scene(cfg, index)
        name = f"scene_{index:04d}"
        points = sample_point_annotations(gt, _point_seed(cfg, index), image_id=name)
        save_image(image, out / "images" / f"{name}.{ext}")
        save_points(points, out / "points" / f"{name}.txt")
        save_mask(gt, out / "masks" / f"{name}.pgm")
        lines.append(f"images/{name}.{ext} points/{name}.txt masks/{name}.pgm")

    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
