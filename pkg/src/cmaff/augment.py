"""Mosaic augmentation for aligned RGB/IR pairs.

Four pairs are composed onto one canvas split at a single jittered point.
The geometric transform (nearest-neighbor resample into each quadrant) is
computed once per tile from its dimensions and applied to both planes, so the
two modalities cannot drift apart; misaligned augmentation is exactly the
failure mode that keeps a two-stream detector from converging.  Labels ride
the same transform, get clipped to the canvas, and are dropped once their
surviving area falls under 1e-4 of it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import AlignmentError
from .metrics import Box

__all__ = ["ImagePair", "MosaicConfig", "mosaic_pair", "remap_box", "MIN_AREA_FRACTION"]

MIN_AREA_FRACTION = 1e-4


@dataclass(frozen=True)
class ImagePair:
    """One aligned RGB (H,W,3) / IR (H,W,1) uint8 pair with its labels."""

    rgb: np.ndarray
    ir: np.ndarray
    labels: tuple[tuple[int, Box], ...] = field(default_factory=tuple)

    def __post_init__(self):
        rgb = np.asarray(self.rgb, dtype=np.uint8)
        ir = np.asarray(self.ir, dtype=np.uint8)
        if ir.ndim == 2:
            ir = ir[:, :, None]
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise AlignmentError(f"rgb plane must be HxWx3, got {rgb.shape}")
        if ir.ndim != 3 or ir.shape[2] != 1:
            raise AlignmentError(f"ir plane must be HxWx1, got {ir.shape}")
        if rgb.shape[:2] != ir.shape[:2]:
            raise AlignmentError(
                f"rgb {rgb.shape[:2]} and ir {ir.shape[:2]} are misaligned"
            )
        labels = tuple((int(c), b) for c, b in self.labels)
        for class_id, box in labels:
            if class_id < 0:
                raise ValueError(f"class_id must be >= 0, got {class_id}")
            if not isinstance(box, Box):
                raise TypeError("labels must pair a class id with a Box")
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "ir", ir)
        object.__setattr__(self, "labels", labels)

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


@dataclass(frozen=True)
class MosaicConfig:
    out_size: int = 640
    center_jitter: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.out_size < 2:
            raise ValueError(f"out_size must be >= 2, got {self.out_size}")
        if not (0.0 <= self.center_jitter <= 0.5):
            raise ValueError(f"center_jitter must be in [0, 0.5], got {self.center_jitter}")


def remap_box(
    box: Box,
    scale: tuple[float, float],
    offset: tuple[float, float],
    canvas: tuple[float, float],
    min_area_fraction: float = MIN_AREA_FRACTION,
) -> Optional[Box]:
    """Scale/translate a normalized box into pixel space, clip to the canvas,
    and renormalize; returns None when too little of it survives."""
    sx, sy = scale
    ox, oy = offset
    cw, ch = canvas
    x0 = (box.xc - box.w / 2.0) * sx + ox
    x1 = (box.xc + box.w / 2.0) * sx + ox
    y0 = (box.yc - box.h / 2.0) * sy + oy
    y1 = (box.yc + box.h / 2.0) * sy + oy
    x0, x1 = max(x0, 0.0), min(x1, cw)
    y0, y1 = max(y0, 0.0), min(y1, ch)
    w = x1 - x0
    h = y1 - y0
    if w <= 0 or h <= 0:
        return None
    if w * h < min_area_fraction * cw * ch:
        return None
    return Box(xc=(x0 + x1) / 2.0 / cw, yc=(y0 + y1) / 2.0 / ch, w=w / cw, h=h / ch)


def _nearest_indices(src: int, dst: int) -> np.ndarray:
    # pixel-center sampling: floor((i + 0.5) * src / dst), clipped
    idx = ((np.arange(dst) + 0.5) * src / dst).astype(np.int64)
    return np.minimum(idx, src - 1)


def mosaic_pair(tiles: Sequence[ImagePair], cfg: MosaicConfig) -> ImagePair:
    """Compose four pairs into one, both planes under the identical transform.

    The split point is the only randomness and is drawn exactly once, before
    any per-plane work, so a fixed seed reproduces the output byte for byte.
    Tiles fill their quadrants in reading order: top-left, top-right,
    bottom-left, bottom-right.
    """
    if len(tiles) != 4:
        raise ValueError(f"mosaic needs exactly 4 tiles, got {len(tiles)}")
    size = cfg.out_size
    rng = np.random.default_rng(cfg.seed)
    lo = 0.5 - cfg.center_jitter
    hi = 0.5 + cfg.center_jitter
    split = rng.uniform(lo, hi, size=2)
    cx = int(round(split[0] * size))
    cy = int(round(split[1] * size))

    rgb_out = np.zeros((size, size, 3), dtype=np.uint8)
    ir_out = np.zeros((size, size, 1), dtype=np.uint8)
    quadrants = (
        (0, 0, cx, cy),
        (cx, 0, size, cy),
        (0, cy, cx, size),
        (cx, cy, size, size),
    )
    labels_out: list[tuple[int, Box]] = []
    for tile, (x0, y0, x1, y1) in zip(tiles, quadrants):
        qw = x1 - x0
        qh = y1 - y0
        if qw <= 0 or qh <= 0:
            continue
        cols = _nearest_indices(tile.width, qw)
        rows = _nearest_indices(tile.height, qh)
        rgb_out[y0:y1, x0:x1] = tile.rgb[np.ix_(rows, cols)]
        ir_out[y0:y1, x0:x1] = tile.ir[np.ix_(rows, cols)]
        for class_id, box in tile.labels:
            remapped = remap_box(box, (qw, qh), (x0, y0), (size, size))
            if remapped is not None:
                labels_out.append((class_id, remapped))
    return ImagePair(rgb=rgb_out, ir=ir_out, labels=tuple(labels_out))
