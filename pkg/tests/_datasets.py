"""Deterministic datasets for tests.

MNIST/FashionMNIST are not available in this environment, so desk-scale
runs use two stand-ins:

* ``digits_dataset``: sklearn's 8x8 handwritten digits upscaled to 28x28
  and augmented (sub-pixel shifts, intensity jitter, noise) to the
  requested per-class count.  MNIST-format: 28x28x1 floats in [0, 1],
  10 classes.
* ``layout_dataset``: images composed of a 4x4 grid of 7x7 texture tiles.
  Inliers draw tile types from a left-to-right Markov chain (long runs);
  outliers use the same tile marginals but i.i.d. arrangements, so only
  models that capture local co-occurrence separate them.  This carries
  the hierarchical structure that makes model depth matter.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage
from sklearn.datasets import load_digits

from dcgmm.data import Dataset

_DIGIT_CACHE: dict[int, np.ndarray] = {}


def _upscaled_digit_bases(size: int = 28) -> tuple[np.ndarray, np.ndarray]:
    if size not in _DIGIT_CACHE:
        x, y = load_digits(return_X_y=True)
        imgs = (x.reshape(-1, 8, 8) / 16.0).astype(np.float32)
        zoomed = ndimage.zoom(imgs, (1, size / 8.0, size / 8.0), order=1)
        _DIGIT_CACHE[size] = (np.clip(zoomed, 0.0, 1.0), y.astype(np.int64))
    return _DIGIT_CACHE[size]


def _shift2d(batch: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(batch)
    h, w = batch.shape[1:3]
    ys, yd = (slice(dy, h), slice(0, h - dy)) if dy >= 0 else (slice(0, h + dy), slice(-dy, h))
    xs, xd = (slice(dx, w), slice(0, w - dx)) if dx >= 0 else (slice(0, w + dx), slice(-dx, w))
    out[:, ys, xs] = batch[:, yd, xd]
    return out


def digits_dataset(n_per_class: int, seed: int, classes=range(10),
                   size: int = 28, max_shift: int = 2) -> Dataset:
    """Augmented upscaled digits: ``n_per_class`` samples per class."""
    bases, base_labels = _upscaled_digit_bases(size)
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for cls in classes:
        pool = bases[base_labels == cls]
        idx = rng.integers(0, len(pool), size=n_per_class)
        batch = pool[idx].copy()
        shifts = rng.integers(-max_shift, max_shift + 1, size=(n_per_class, 2))
        for dy in range(-max_shift, max_shift + 1):
            for dx in range(-max_shift, max_shift + 1):
                sel = (shifts[:, 0] == dy) & (shifts[:, 1] == dx)
                if sel.any() and (dy or dx):
                    batch[sel] = _shift2d(batch[sel], dy, dx)
        gain = rng.uniform(0.85, 1.15, size=(n_per_class, 1, 1)).astype(np.float32)
        noise = rng.normal(0.0, 0.02, size=batch.shape).astype(np.float32)
        batch = np.clip(batch * gain + noise, 0.0, 1.0)
        images.append(batch)
        labels.append(np.full(n_per_class, cls, dtype=np.int64))
    images = np.concatenate(images)[..., None]
    labels = np.concatenate(labels)
    order = rng.permutation(len(labels))
    return Dataset(images[order], labels[order])


# ------------------------------------------------------------ layout tiles

def _tile_bank(tile: int = 4) -> np.ndarray:
    """Six distinctive small texture tiles."""
    t = np.zeros((6, tile, tile), dtype=np.float32)
    yy, xx = np.mgrid[0:tile, 0:tile]
    t[0][(yy % 2) == 0] = 1.0              # horizontal stripes
    t[1][(xx % 2) == 0] = 1.0              # vertical stripes
    t[2][yy == xx] = 1.0                   # diagonal
    t[3][yy + xx == tile - 1] = 1.0        # anti-diagonal
    t[4][:] = 0.85                         # bright solid
    t[5][(yy + xx) % 2 == 0] = 1.0         # checkerboard
    return t


def layout_dataset(n: int, seed: int, shuffled: bool = False,
                   grid: int = 7, tile: int = 4) -> Dataset:
    """Tile-grid images where only local tile co-occurrence separates classes.

    Inlier layouts follow a cyclic left-to-right walk (each tile equals its
    left neighbor or the next type), giving astronomically many layouts with
    uniform tile marginals; outliers use i.i.d. uniform tiles.  A global
    template model sees the same marginals either way; local-pair structure
    is what distinguishes them.
    """
    rng = np.random.default_rng(seed)
    bank = _tile_bank(tile)
    n_types = len(bank)
    if shuffled:
        layouts = rng.integers(0, n_types, size=(n, grid, grid))
    else:
        layouts = np.zeros((n, grid, grid), dtype=np.int64)
        for r in range(grid):
            layouts[:, r, 0] = rng.integers(0, n_types, size=n)
            for c in range(1, grid):
                step = rng.integers(0, 2, size=n)  # stay or advance one type
                layouts[:, r, c] = (layouts[:, r, c - 1] + step) % n_types
    side = grid * tile
    images = np.zeros((n, side, side), dtype=np.float32)
    for r in range(grid):
        for c in range(grid):
            block = bank[layouts[:, r, c]]
            images[:, r * tile:(r + 1) * tile, c * tile:(c + 1) * tile] = block
    gain = rng.uniform(0.8, 1.0, size=(n, 1, 1)).astype(np.float32)
    noise = rng.normal(0.0, 0.05, size=images.shape).astype(np.float32)
    images = np.clip(images * gain + noise, 0.0, 1.0)
    labels = np.full(n, int(shuffled), dtype=np.int64)
    return Dataset(images[..., None], labels)


# ------------------------------------------------------- synthetic mixtures

def blob_mixture(n: int, seed: int, centers, sigma: float = 0.06
                 ) -> tuple[np.ndarray, np.ndarray]:
    """2-D points from an equal-weight spherical Gaussian mixture."""
    rng = np.random.default_rng(seed)
    centers = np.asarray(centers, dtype=np.float64)
    comp = rng.integers(0, len(centers), size=n)
    pts = centers[comp] + rng.normal(0.0, sigma, size=(n, 2))
    return pts.astype(np.float32), comp
