"""Binary PGM (P5) and PPM (P6) image IO, plus grayscale render helpers.

These formats need no external codecs and round-trip byte-exactly, which the
paired-augmentation determinism guarantees rely on.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError


def _read_header(blob: bytes, magic: bytes, path) -> tuple[int, int, int]:
    if blob[:2] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} file, got {blob[:2]!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        token = blob[start:pos]
        if not token.isdigit():
            raise FormatError(f"{path}: bad header token {token!r}")
        fields.append(int(token))
    pos += 1  # single whitespace byte separates header from raster
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported, got {maxval}")
    return width, height, pos


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into an (H, W) uint8 array."""
    blob = Path(path).read_bytes()
    width, height, pos = _read_header(blob, b"P5", path)
    raster = blob[pos:]
    if len(raster) != width * height:
        raise FormatError(f"{path}: raster size {len(raster)} != {width}x{height}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(path, image) -> None:
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim != 2:
        raise FormatError(f"PGM image must be HxW, got shape {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into an (H, W, 3) uint8 array."""
    blob = Path(path).read_bytes()
    width, height, pos = _read_header(blob, b"P6", path)
    raster = blob[pos:]
    if len(raster) != width * height * 3:
        raise FormatError(f"{path}: raster size {len(raster)} != {width}x{height}x3")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path, image) -> None:
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"PPM image must be HxWx3, got shape {img.shape}")
    h, w, _ = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


def render_gray(values) -> np.ndarray:
    """Min-max normalize to uint8; constant input renders as all zeros."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    lo = float(arr.min())
    hi = float(arr.max())
    if hi - lo <= 0:
        return np.zeros(arr.shape, dtype=np.uint8)
    scaled = np.rint((arr - lo) / (hi - lo) * 255.0)
    return scaled.astype(np.uint8)
