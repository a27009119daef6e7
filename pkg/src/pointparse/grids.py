"""Core raster and label types plus the file formats shared by all modules.

Images are binary PGM (P5, single channel) or PPM (P6, three channels) with
max value 255. Label masks are PGM with class ids as gray values and 255
reserved as the IGNORE sentinel. Point annotations are plain text, one
``row col class`` triple per line. A dataset manifest lists
``image_path annotation_path [gt_mask_path]`` per line, paths relative to
the manifest file.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Reserved label value marking unannotated pixels. Class ids must stay below it.
IGNORE = 255


class RasterFormatError(ValueError):
    """Raised when a PGM/PPM file does not parse as documented."""


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """H x W x C raster with real values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"image values must be (H, W, C) with all dims >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("image values must be finite")
        object.__setattr__(self, "values", v)
        v.flags.writeable = False

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True, eq=False)
class PseudoMask:
    """Per-pixel class labels with IGNORE marking unannotated pixels."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.array(self.labels, dtype=np.int64)
        if lab.ndim != 2 or min(lab.shape) < 1:
            raise ValueError(f"mask labels must be (H, W), got {lab.shape}")
        if np.any((lab < 0) | (lab > IGNORE)):
            raise ValueError("labels must lie in [0, 255]")
        object.__setattr__(self, "labels", lab)
        lab.flags.writeable = False

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def annotated_count(self) -> int:
        return int(np.count_nonzero(self.labels != IGNORE))

    def is_dense(self) -> bool:
        return bool(np.all(self.labels != IGNORE))

    def validate_classes(self, num_classes: int) -> None:
        lab = self.labels
        bad = lab[(lab != IGNORE) & (lab >= num_classes)]
        if bad.size:
            raise ValueError(f"label {int(bad[0])} out of range for {num_classes} classes")


@dataclass(frozen=True)
class PointAnnotationSet:
    """Sparse labels as an ordered list of (row, col, class_id) points."""

    points: tuple[tuple[int, int, int], ...]
    image_id: str = ""

    def __post_init__(self):
        pts = tuple((int(r), int(c), int(k)) for r, c, k in self.points)
        seen = set()
        for r, c, k in pts:
            if (r, c) in seen:
                raise ValueError(f"duplicate annotation at ({r}, {c})")
            seen.add((r, c))
            if k < 0 or k >= IGNORE:
                raise ValueError(f"class id {k} out of range at ({r}, {c})")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    def class_ids(self) -> set[int]:
        return {k for _, _, k in self.points}


@dataclass(frozen=True, eq=False)
class Sample:
    """One dataset entry: image, point annotations, and optional dense truth."""

    image: ImageGrid
    points: PointAnnotationSet
    point_mask: PseudoMask
    gt_mask: PseudoMask | None = None
    image_id: str = ""


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: tuple[Sample, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if not 2 <= self.num_classes < IGNORE:
            raise ValueError(f"num_classes must be in [2, {IGNORE}), got {self.num_classes}")
        for s in self.samples:
            s.point_mask.validate_classes(self.num_classes)
            if s.gt_mask is not None:
                s.gt_mask.validate_classes(self.num_classes)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


def points_to_pseudo_mask(points: PointAnnotationSet, height: int, width: int) -> PseudoMask:
    """Materialize a sparse mask: exactly one labeled pixel per point."""
    labels = np.full((height, width), IGNORE, dtype=np.int64)
    for r, c, k in points.points:
        if not (0 <= r < height and 0 <= c < width):
            raise ValueError(f"point ({r}, {c}) outside {height}x{width} grid")
        labels[r, c] = k
    return PseudoMask(labels)


def mask_to_points(mask: PseudoMask, image_id: str = "") -> PointAnnotationSet:
    """Extract annotated pixels in row-major scan order."""
    rows, cols = np.nonzero(mask.labels != IGNORE)
    pts = tuple((int(r), int(c), int(mask.labels[r, c])) for r, c in zip(rows, cols))
    return PointAnnotationSet(pts, image_id=image_id)


def class_set(mask: PseudoMask) -> set[int]:
    """Distinct non-IGNORE labels present in the mask."""
    lab = mask.labels
    return {int(k) for k in np.unique(lab[lab != IGNORE])}


# ---------------------------------------------------------------------------
# Raster I/O
# ---------------------------------------------------------------------------

def _read_pnm_header(data: bytes, path: Path):
    # Header tokens may be separated by any whitespace; '#' starts a comment.
    pos = 0
    tokens = []
    while len(tokens) < 4 and pos < len(data):
        m = re.compile(rb"\s*(#[^\n]*\n?|\S+)").match(data, pos)
        if m is None:
            break
        pos = m.end()
        tok = m.group(1)
        if not tok.startswith(b"#"):
            tokens.append(tok)
    if len(tokens) < 4:
        raise RasterFormatError(f"{path}: truncated header")
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise RasterFormatError(f"{path}: expected P5 or P6 magic, got {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise RasterFormatError(f"{path}: non-numeric header field") from None
    if width < 1 or height < 1:
        raise RasterFormatError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise RasterFormatError(f"{path}: only max value 255 supported, got {maxval}")
    return magic, width, height, maxval, pos


def _read_pnm(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    magic, width, height, maxval, pos = _read_pnm_header(data, path)
    channels = 1 if magic == b"P5" else 3
    n = width * height * channels
    raw = data[pos:pos + n]
    if len(raw) != n:
        raise RasterFormatError(f"{path}: expected {n} pixel bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width, channels)


def load_image(path) -> ImageGrid:
    """Read a PGM/PPM file into an ImageGrid with values scaled to [0, 1]."""
    return ImageGrid(_read_pnm(path).astype(np.float64) / 255.0)


def save_image(image: ImageGrid, path) -> None:
    """Write an ImageGrid as binary PGM (1 channel) or PPM (3 channels)."""
    if image.channels not in (1, 3):
        raise ValueError(f"can only write 1- or 3-channel images, got {image.channels}")
    magic = b"P5" if image.channels == 1 else b"P6"
    quant = np.clip(np.rint(image.values * 255.0), 0, 255).astype(np.uint8)
    header = b"%s\n%d %d\n255\n" % (magic, image.width, image.height)
    Path(path).write_bytes(header + quant.tobytes())


def load_mask(path) -> PseudoMask:
    """Read a PGM label mask; gray value 255 is IGNORE."""
    arr = _read_pnm(path)
    if arr.shape[2] != 1:
        raise RasterFormatError(f"{path}: masks must be single-channel PGM")
    return PseudoMask(arr[:, :, 0].astype(np.int64))


def save_mask(mask: PseudoMask, path) -> None:
    header = b"P5\n%d %d\n255\n" % (mask.width, mask.height)
    Path(path).write_bytes(header + mask.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# Annotation and manifest I/O
# ---------------------------------------------------------------------------

def load_points(path, image_id: str = "") -> PointAnnotationSet:
    """Read ``row col class`` lines; '#' starts a comment."""
    pts = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        parts = body.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'row col class', got {line!r}")
        pts.append(tuple(int(p) for p in parts))
    return PointAnnotationSet(tuple(pts), image_id=image_id or Path(path).stem)


def save_points(points: PointAnnotationSet, path) -> None:
    lines = [f"{r} {c} {k}" for r, c, k in points.points]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_dataset(manifest_path, num_classes: int | None = None) -> Dataset:
    """Load samples listed in a manifest file, in file order.

    num_classes is taken from a ``# num_classes: K`` comment when present,
    otherwise inferred as the largest label seen plus one.
    """
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    declared = None
    entries = []
    for lineno, line in enumerate(manifest_path.read_text().splitlines(), start=1):
        if line.strip().startswith("#"):
            m = re.match(r"#\s*num_classes\s*:\s*(\d+)", line.strip())
            if m:
                declared = int(m.group(1))
            continue
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise ValueError(f"{manifest_path}:{lineno}: expected 2 or 3 paths, got {line!r}")
        entries.append(parts)

    samples = []
    max_label = -1
    for parts in entries:
        image = load_image(base / parts[0])
        image_id = Path(parts[0]).stem
        points = load_points(base / parts[1], image_id=image_id)
        mask = points_to_pseudo_mask(points, image.height, image.width)
        gt = None
        if len(parts) == 3:
            gt = load_mask(base / parts[2])
            if (gt.height, gt.width) != (image.height, image.width):
                raise ValueError(f"{parts[2]}: ground-truth mask dims do not match {parts[0]}")
            lab = gt.labels[gt.labels != IGNORE]
            if lab.size:
                max_label = max(max_label, int(lab.max()))
        if points.points:
            max_label = max(max_label, max(k for _, _, k in points.points))
        samples.append(Sample(image, points, mask, gt, image_id=image_id))

    if num_classes is None:
        num_classes = declared if declared is not None else max(max_label + 1, 2)
    return Dataset(tuple(samples), num_classes)
