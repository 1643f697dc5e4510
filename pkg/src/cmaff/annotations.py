"""VEDAI-style annotation ingestion: rotated four-corner boxes to normalized
horizontal boxes, label-file emission, and dataset statistics.

The canonical input line is ``x1 y1 x2 y2 x3 y3 x4 y4 class_id`` in pixel
coordinates of a square image (side configured, 1024 by default).  Raw archive
files that carry extra columns should be adapted to this form first;
``parse_vedai_line`` is the single place such an adapter would plug into.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateBoxError, ParseError
from .images import write_pgm
from .metrics import Box

__all__ = [
    "VEDAI_CLASS_NAMES",
    "RotatedBox",
    "DatasetStats",
    "convert_obb_to_hbb",
    "parse_vedai_line",
    "convert_vedai_text",
    "write_label",
    "parse_label_line",
    "read_labels",
    "dataset_stats",
    "write_stats_heatmaps",
]

VEDAI_CLASS_NAMES = (
    "car",
    "truck",
    "pickup",
    "tractor",
    "camper",
    "ship",
    "van",
    "plane",
    "other",
)

_CLAMP_WARN = 1e-6


@dataclass(frozen=True)
class RotatedBox:
    """Four corner points in pixels, in any order, plus class and image side."""

    xs: tuple[float, float, float, float]
    ys: tuple[float, float, float, float]
    class_id: int
    image_size: int = 1024

    def __post_init__(self):
        if len(self.xs) != 4 or len(self.ys) != 4:
            raise ValueError("a rotated box needs exactly 4 corners")
        for v in (*self.xs, *self.ys):
            if not np.isfinite(v):
                raise ValueError("corner coordinates must be finite")
        if self.image_size <= 0:
            raise ValueError(f"image_size must be positive, got {self.image_size}")
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")


def convert_obb_to_hbb(r: RotatedBox) -> Box:
    """Tightest axis-aligned box around the corners, normalized by image side.

    Center is the midpoint of the corner extremes; width/height are the
    extreme spans.  Results are clamped to [0, 1]; clamping by more than 1e-6
    emits a warning, and a box with no extent along an axis is an error.
    """
    side = float(r.image_size)
    lo_x, hi_x = min(r.xs), max(r.xs)
    lo_y, hi_y = min(r.ys), max(r.ys)
    if hi_x == lo_x or hi_y == lo_y:
        raise DegenerateBoxError(f"box has zero extent: x {lo_x}..{hi_x}, y {lo_y}..{hi_y}")
    x0, x1 = lo_x / side, hi_x / side
    y0, y1 = lo_y / side, hi_y / side
    clamped = [min(max(v, 0.0), 1.0) for v in (x0, x1, y0, y1)]
    overshoot = max(abs(a - b) for a, b in zip(clamped, (x0, x1, y0, y1)))
    if overshoot > _CLAMP_WARN:
        warnings.warn(
            f"box extends {overshoot:.3g} beyond the image and was clamped",
            stacklevel=2,
        )
    x0, x1, y0, y1 = clamped
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        raise DegenerateBoxError("box lies entirely outside the image")
    return Box(xc=(x0 + x1) / 2.0, yc=(y0 + y1) / 2.0, w=x1 - x0, h=y1 - y0)


def parse_vedai_line(
    line: str, lineno: int = 0, image_size: int = 1024
) -> RotatedBox | None:
    """Parse one annotation line; blank and ``#`` comment lines yield None."""
    stripped = line.split("#", 1)[0].strip()
    if not stripped:
        return None
    fields = stripped.split()
    if len(fields) != 9:
        raise ParseError(f"expected 9 fields, got {len(fields)}", line=lineno)
    try:
        values = [float(v) for v in fields[:8]]
        class_id = int(fields[8])
    except ValueError as exc:
        raise ParseError(f"non-numeric field: {exc}", line=lineno) from exc
    try:
        return RotatedBox(
            xs=(values[0], values[2], values[4], values[6]),
            ys=(values[1], values[3], values[5], values[7]),
            class_id=class_id,
            image_size=image_size,
        )
    except ValueError as exc:
        raise ParseError(str(exc), line=lineno) from exc


def convert_vedai_text(text: str, image_size: int = 1024) -> list[tuple[int, Box]]:
    """Convert a whole annotation file's text to (class_id, Box) labels."""
    labels = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        rotated = parse_vedai_line(raw, lineno=lineno, image_size=image_size)
        if rotated is None:
            continue
        try:
            labels.append((rotated.class_id, convert_obb_to_hbb(rotated)))
        except DegenerateBoxError as exc:
            raise ParseError(str(exc), line=lineno) from exc
    return labels


def write_label(box: Box, class_id: int) -> str:
    """One output line, fixed six-decimal formatting for stable bytes."""
    return f"{class_id} {box.xc:.6f} {box.yc:.6f} {box.w:.6f} {box.h:.6f}"


def parse_label_line(line: str, lineno: int = 0) -> tuple[int, Box] | None:
    stripped = line.split("#", 1)[0].strip()
    if not stripped:
        return None
    fields = stripped.split()
    if len(fields) != 5:
        raise ParseError(f"expected 5 fields, got {len(fields)}", line=lineno)
    try:
        return int(fields[0]), Box(*(float(v) for v in fields[1:5]))
    except ValueError as exc:
        raise ParseError(str(exc), line=lineno) from exc


def read_labels(path) -> list[tuple[int, Box]]:
    labels = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        parsed = parse_label_line(raw, lineno=lineno)
        if parsed is not None:
            labels.append(parsed)
    return labels


@dataclass
class DatasetStats:
    """Instance counts plus 2-D histograms of centers and of sizes."""

    class_counts: dict[int, int] = field(default_factory=dict)
    center_hist: np.ndarray = field(default_factory=lambda: np.zeros((1, 1), dtype=np.int64))
    size_hist: np.ndarray = field(default_factory=lambda: np.zeros((1, 1), dtype=np.int64))

    @property
    def total(self) -> int:
        return sum(self.class_counts.values())


def _bin_index(value: float, grid_n: int) -> int:
    return min(int(value * grid_n), grid_n - 1)


def dataset_stats(labels: Iterable[tuple[int, Box]], grid_n: int = 8) -> DatasetStats:
    """Histogram rows index y (or h), columns index x (or w)."""
    if grid_n < 1:
        raise ValueError(f"grid_n must be >= 1, got {grid_n}")
    stats = DatasetStats(
        center_hist=np.zeros((grid_n, grid_n), dtype=np.int64),
        size_hist=np.zeros((grid_n, grid_n), dtype=np.int64),
    )
    for class_id, box in labels:
        stats.class_counts[class_id] = stats.class_counts.get(class_id, 0) + 1
        stats.center_hist[_bin_index(box.yc, grid_n), _bin_index(box.xc, grid_n)] += 1
        stats.size_hist[_bin_index(box.h, grid_n), _bin_index(box.w, grid_n)] += 1
    return stats


def write_stats_heatmaps(stats: DatasetStats, prefix) -> list[Path]:
    """Render both histograms as PGM heatmaps scaled to the densest bin."""
    prefix = Path(prefix)
    written = []
    for name, hist in (("center", stats.center_hist), ("size", stats.size_hist)):
        peak = int(hist.max())
        if peak > 0:
            img = np.rint(hist.astype(np.float64) / peak * 255.0).astype(np.uint8)
        else:
            img = np.zeros(hist.shape, dtype=np.uint8)
        path = prefix.with_name(prefix.name + f".{name}.pgm")
        write_pgm(path, img)
        written.append(path)
    return written


def class_name(class_id: int, names: Sequence[str] = VEDAI_CLASS_NAMES) -> str:
    return names[class_id] if 0 <= class_id < len(names) else str(class_id)
