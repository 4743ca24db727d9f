"""Dual-scale patch extraction around a nodule center."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError

SMALL_SHAPE = (50, 50, 5)
LARGE_SHAPE = (100, 100, 10)
HU_WINDOW = (-1000.0, 400.0)
FILL_VALUE = 0.0


@dataclass
class PatchPair:
    small: np.ndarray
    large: np.ndarray
    label: int | None = None
    nodule_id: str = ""
    meta: dict = field(default_factory=dict)


def normalize_hu(volume: np.ndarray, window: tuple[float, float] = HU_WINDOW) -> np.ndarray:
    """Linear map of attenuation values in ``window`` to [0, 1], clipped."""
    lo, hi = window
    return np.clip((np.asarray(volume, dtype=np.float32) - lo) / (hi - lo), 0.0, 1.0)


def window_start(center: int, length: int) -> int:
    """First index of a ``length`` window around ``center``.

    Even lengths put the center at offset ``ceil(length/2) - 1``.
    """
    return center - ((length + 1) // 2 - 1)


def crop(volume: np.ndarray, center, shape, fill: float = FILL_VALUE) -> np.ndarray:
    """Axis-aligned crop with out-of-bounds voxels set to ``fill``."""
    out = np.full(shape, fill, dtype=np.float32)
    src, dst = [], []
    for c, n, dim in zip(center, shape, volume.shape):
        start = window_start(c, n)
        lo, hi = max(start, 0), min(start + n, dim)
        if lo >= hi:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - start, hi - start))
    out[tuple(dst)] = volume[tuple(src)]
    return out


def extract_patch_pair(volume: np.ndarray, center, small_shape=SMALL_SHAPE, large_shape=LARGE_SHAPE) -> PatchPair:
    """Co-centered small and large crops of an already-normalized volume."""
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise DataError(f"expected a 3D volume, got shape {volume.shape}")
    center = tuple(int(c) for c in center)
    if any(not 0 <= c < d for c, d in zip(center, volume.shape)):
        raise DataError(f"center {center} outside volume of shape {volume.shape}")
    return PatchPair(crop(volume, center, small_shape), crop(volume, center, large_shape))
