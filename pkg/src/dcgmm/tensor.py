"""Dense NHWC tensor helpers.

Every inter-layer quantity in this package is a dense 4-D numpy array in
(batch, height, width, channel) order, float32, C-contiguous.  This module
holds the shape algebra and the small numeric helpers that all layers share.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np


class DcgmmError(Exception):
    """Base class for all package errors."""


class ConfigError(DcgmmError):
    """Invalid architecture string or inconsistent layer shapes."""


class DataError(DcgmmError):
    """Broken or inconsistent input data files."""


class NumericalError(DcgmmError):
    """Non-finite values where the contract requires finite ones."""


class CheckpointError(DcgmmError):
    """Unreadable, truncated or corrupt checkpoint file."""


class Shape3(NamedTuple):
    """Spatial shape of one layer's activities, batch dimension omitted."""

    h: int
    w: int
    c: int


def as_tensor4(data, shape: tuple[int, int, int, int] | None = None) -> np.ndarray:
    """Coerce ``data`` to a float32, C-contiguous NHWC array.

    Raises NumericalError if any entry is not finite, ConfigError if the
    array is not 4-D (or does not match ``shape`` when given).
    """
    t = np.ascontiguousarray(data, dtype=np.float32)
    if t.ndim != 4:
        raise ConfigError(f"expected a 4-D NHWC tensor, got shape {t.shape}")
    if shape is not None and t.shape != tuple(shape):
        raise ConfigError(f"expected tensor shape {tuple(shape)}, got {t.shape}")
    if not np.all(np.isfinite(t)):
        raise NumericalError("tensor contains NaN or Inf entries")
    return t


def check_finite(t: np.ndarray, context: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(t)):
        raise NumericalError(f"non-finite values in {context}")
    return t


def channel_vector(t: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    """The length-C channel slice at position (n, h, w).

    Returns a read-only view.  Indices must be non-negative and in range.
    """
    if t.ndim != 4:
        raise ConfigError(f"expected a 4-D NHWC tensor, got shape {t.shape}")
    nn, hh, ww, _ = t.shape
    if not (0 <= n < nn and 0 <= h < hh and 0 <= w < ww):
        raise IndexError(f"position ({n}, {h}, {w}) outside tensor shape {t.shape}")
    v = t[n, h, w, :]
    v.flags.writeable = False
    return v


def log_sum_exp(v: np.ndarray, axis: int | None = None) -> np.ndarray | float:
    """log(sum(exp(v))) via max-shift; exact for a single element.

    With ``axis=None`` the input must be a non-empty 1-D vector and a float
    is returned; otherwise the reduction runs along ``axis``.
    """
    v = np.asarray(v)
    if axis is None:
        if v.ndim != 1 or v.size == 0:
            raise ValueError("log_sum_exp expects a non-empty 1-D vector")
        if v.size == 1:
            return float(v[0])
        m = np.max(v)
        return float(m + np.log(np.sum(np.exp(v - m), dtype=np.float64)))
    m = np.max(v, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True, dtype=np.float64))
    return np.squeeze(out, axis=axis)
