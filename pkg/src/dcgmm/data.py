"""Dataset ingestion and image export.

Reads the classic big-endian IDX format (optionally gzipped) for images
and labels, plus a minimal raw-tensor sidecar format ("DCT0" magic,
big-endian u32 N,H,W,C, little-endian float32 payload) for arbitrary
H x W x C float images.  Sample grids are written as 8-bit PNG.
"""

from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .tensor import DataError

log = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
RAW_MAGIC = b"DCT0"
SEPARATOR_GRAY = 128


@dataclass
class Dataset:
    """Images in [0, 1] with integer labels (all zero when unlabeled)."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, H, W, C), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError(f"label count {self.labels.shape} != image count "
                            f"{self.images.shape[0]}")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def classes(self) -> set[int]:
        return set(int(c) for c in np.unique(self.labels))


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx_images(raw: bytes, path) -> np.ndarray:
    if len(raw) < 16:
        raise DataError(f"{path}: truncated IDX image header")
    magic, n, h, w = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise DataError(f"{path}: bad IDX image magic 0x{magic:08x}")
    if len(raw) != 16 + n * h * w:
        raise DataError(f"{path}: payload size {len(raw) - 16} != {n}x{h}x{w}")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, h, w, 1)
    return pixels.astype(np.float32) / 255.0


def _parse_idx_labels(raw: bytes, path) -> np.ndarray:
    if len(raw) < 8:
        raise DataError(f"{path}: truncated IDX label header")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != IDX_LABEL_MAGIC:
        raise DataError(f"{path}: bad IDX label magic 0x{magic:08x}")
    if len(raw) != 8 + n:
        raise DataError(f"{path}: payload size {len(raw) - 8} != {n}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)


def _parse_raw_images(raw: bytes, path) -> np.ndarray:
    if len(raw) < 20:
        raise DataError(f"{path}: truncated raw-tensor header")
    n, h, w, c = struct.unpack(">IIII", raw[4:20])
    expect = 20 + n * h * w * c * 4
    if len(raw) != expect:
        raise DataError(f"{path}: payload size {len(raw) - 20} != {n}x{h}x{w}x{c} floats")
    images = np.frombuffer(raw, dtype="<f4", offset=20).reshape(n, h, w, c).copy()
    bad = int(np.count_nonzero((images < 0.0) | (images > 1.0)))
    if bad:
        log.warning("%s: clamped %d pixel values outside [0, 1]", path, bad)
        images = np.clip(images, 0.0, 1.0)
    return images


def save_raw(images: np.ndarray, path) -> None:
    """Write the sidecar format: DCT0 magic, u32 BE dims, float32 LE payload."""
    images = np.ascontiguousarray(images, dtype="<f4")
    if images.ndim != 4:
        raise DataError(f"raw tensor must be (N, H, W, C), got {images.shape}")
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC + struct.pack(">IIII", *images.shape) + images.tobytes())


def load_images(path) -> np.ndarray:
    """Load an image tensor from IDX or raw sidecar data, sniffed by magic."""
    raw = _read_bytes(path)
    if raw[:4] == RAW_MAGIC:
        return _parse_raw_images(raw, path)
    return _parse_idx_images(raw, path)


def load_idx(images_path, labels_path=None) -> Dataset:
    """Load an IDX (or sidecar) image file with optional IDX labels."""
    images = load_images(images_path)
    if labels_path is None:
        labels = np.zeros(images.shape[0], dtype=np.int64)
    else:
        labels = _parse_idx_labels(_read_bytes(labels_path), labels_path)
        if labels.shape[0] != images.shape[0]:
            raise DataError(f"label count {labels.shape[0]} != image count "
                            f"{images.shape[0]}")
    return Dataset(images, labels)


def write_idx_images(images_uint8: np.ndarray, path) -> None:
    """Write (N, H, W) uint8 pixels as an IDX image file."""
    a = np.ascontiguousarray(images_uint8, dtype=np.uint8)
    if a.ndim == 4 and a.shape[-1] == 1:
        a = a[..., 0]
    if a.ndim != 3:
        raise DataError(f"IDX images must be (N, H, W), got {a.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, *a.shape) + a.tobytes())


def write_idx_labels(labels: np.ndarray, path) -> None:
    a = np.ascontiguousarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, a.shape[0]) + a.tobytes())


def filter_classes(ds: Dataset, keep, per_class_cap: int | None = None) -> Dataset:
    """Stable-ordered subset holding only the requested classes.

    With ``per_class_cap`` at most that many samples of each class survive,
    in dataset order.
    """
    keep = set(int(c) for c in keep)
    missing = keep - ds.classes
    if missing:
        raise DataError(f"requested classes {sorted(missing)} not present in dataset")
    mask = np.isin(ds.labels, sorted(keep))
    if per_class_cap is not None:
        seen: dict[int, int] = {}
        for i in np.flatnonzero(mask):
            c = int(ds.labels[i])
            seen[c] = seen.get(c, 0) + 1
            if seen[c] > per_class_cap:
                mask[i] = False
    if not mask.any():
        raise DataError("class filter produced an empty dataset")
    return Dataset(ds.images[mask], ds.labels[mask])


def write_png_grid(images: np.ndarray, cols: int, path) -> int:
    """Write images as a row-major grid PNG with 1-pixel gray separators.

    Values are clamped to [0, 1] (the clamp count is returned and logged).
    Grayscale needs C=1, color C=3; anything else is an error.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[-1] not in (1, 3):
        raise DataError(f"PNG grid needs (N, H, W, 1|3) images, got {images.shape}")
    if cols < 1:
        raise DataError("cols must be >= 1")
    n, h, w, c = images.shape
    clamped = int(np.count_nonzero((images < 0.0) | (images > 1.0)))
    if clamped:
        log.warning("write_png_grid: clamped %d values outside [0, 1]", clamped)
    pix = np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    rows = (n + cols - 1) // cols
    canvas = np.full((rows * (h + 1) + 1, cols * (w + 1) + 1, c), SEPARATOR_GRAY,
                     dtype=np.uint8)
    for i in range(n):
        r, col = divmod(i, cols)
        y, x = 1 + r * (h + 1), 1 + col * (w + 1)
        canvas[y:y + h, x:x + w, :] = pix[i]
    img = Image.fromarray(canvas[:, :, 0] if c == 1 else canvas,
                          mode="L" if c == 1 else "RGB")
    img.save(path, format="PNG")
    return clamped


def read_png(path) -> np.ndarray:
    """Decode a PNG back to a (H, W, C) uint8 array (test/round-trip helper)."""
    arr = np.asarray(Image.open(path))
    return arr[:, :, None] if arr.ndim == 2 else arr
