"""Deterministic synthetic nodules for desk-scale experiments.

Benign nodules are smooth Gaussian blobs. Malignant nodules are the same kind
of blob plus 6-12 thin radial spikes, a stand-in for spiculated margins. Each
sample is rendered once on the large grid (additive noise sigma 0.05, clipped
to [0, 1]) and both patches are cropped from that one field, so the small
patch is exactly the central part of the large one.

Geometry is expressed in units of the small patch half-extent, so the same
generator works at paper size (50x50x5 / 100x100x10) and at the reduced
``small`` preset (16x16x4 / 32x32x8).
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError
from .patches import PatchPair, crop, window_start

DIMS = {
    "paper": ((50, 50, 5), (100, 100, 10)),
    "small": ((16, 16, 4), (32, 32, 8)),
}

NOISE_SIGMA = 0.05
BACKGROUND = 0.1


def resolve_dims(dims) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
    if isinstance(dims, str):
        try:
            return DIMS[dims]
        except KeyError:
            raise ConfigurationError(f"unknown dims preset {dims!r}; choose from {', '.join(DIMS)}") from None
    small, large = dims
    return tuple(small), tuple(large)


def _segment_distance(points: np.ndarray, direction: np.ndarray, start: float, stop: float):
    """Distance from each point to the segment ``[start, stop] * direction`` and the position along it."""
    t = np.clip(points @ direction, start, stop)
    nearest = t[..., None] * direction
    return np.linalg.norm(points - nearest, axis=-1), t


def render_nodule(rng: np.random.Generator, malignant: bool, small_shape, large_shape,
                  spike_contrast: float = 1.0) -> tuple[np.ndarray, dict]:
    """Render one nodule on the large grid; returns ``(volume, meta)``."""
    half_xy = small_shape[0] / 2.0
    half_z = max(small_shape[2] / 2.0, 1.0)
    center = tuple(window_start(0, n) * -1 for n in large_shape)
    axes = [(np.arange(n) - c) / h for n, c, h in zip(large_shape, center, (half_xy, half_xy, half_z))]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    offset = rng.uniform(-0.08, 0.08, size=3) * np.array([1.0, 1.0, 0.5])
    points = grid - offset
    radius = rng.uniform(0.22, 0.4)
    intensity = rng.uniform(0.55, 0.9)
    dist = np.linalg.norm(points, axis=-1)
    field = intensity * np.exp(-0.5 * (dist / (0.5 * radius)) ** 2)

    n_spikes = 0
    if malignant:
        n_spikes = int(rng.integers(6, 13))
        width = max(0.07, 0.9 / half_xy)
        for _ in range(n_spikes):
            theta = rng.uniform(0, 2 * np.pi)
            elev = rng.normal(0.0, 0.25)
            direction = np.array([np.cos(theta) * np.cos(elev), np.sin(theta) * np.cos(elev), np.sin(elev)])
            length = radius * rng.uniform(1.8, 3.0)
            d, t = _segment_distance(points, direction, 0.5 * radius, length)
            taper = 1.0 - 0.6 * (t - 0.5 * radius) / (length - 0.5 * radius)
            spike = spike_contrast * intensity * 0.8 * taper * np.exp(-0.5 * (d / width) ** 2)
            field = np.maximum(field, spike)

    volume = BACKGROUND + field + rng.normal(0.0, NOISE_SIGMA, size=field.shape)
    meta = {
        "radius": float(radius),
        "intensity": float(intensity),
        "n_spikes": n_spikes,
        "offset": offset.tolist(),
        "scale": [half_xy, half_xy, half_z],
    }
    return np.clip(volume, 0.0, 1.0).astype(np.float32), meta


def generate_synthetic(n: int, malignant_fraction: float = 0.5, seed: int = 0, dims="small",
                       spike_contrast: float = 1.0, id_prefix: str = "syn") -> list[PatchPair]:
    """``n`` labeled patch pairs, exactly ``round(n * malignant_fraction)`` malignant.

    Sample ``i`` depends only on ``(seed, i)``; class order is a seeded shuffle.
    """
    if n < 2:
        raise ConfigurationError(f"need at least 2 samples, got {n}")
    if not 0 < malignant_fraction < 1:
        raise ConfigurationError(f"malignant_fraction must be in (0, 1), got {malignant_fraction}")
    n_mal = int(round(n * malignant_fraction))
    if n_mal < 1 or n_mal > n - 1:
        raise ConfigurationError(f"{n} samples at fraction {malignant_fraction} leaves a class empty")
    small_shape, large_shape = resolve_dims(dims)
    labels = np.zeros(n, dtype=int)
    labels[:n_mal] = 1
    labels = labels[np.random.default_rng([seed, 0xC1A55]).permutation(n)]

    width = len(str(n - 1))
    center = tuple(-window_start(0, s) for s in large_shape)
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        volume, meta = render_nodule(rng, bool(labels[i]), small_shape, large_shape, spike_contrast)
        out.append(PatchPair(
            small=crop(volume, center, small_shape),
            large=volume,
            label=int(labels[i]),
            nodule_id=f"{id_prefix}{i:0{width}d}",
            meta=meta,
        ))
    return out


def boundary_shell_statistic(pair: PatchPair, inner: float = 1.2, outer: float = 2.4) -> float:
    """Mean gradient magnitude of the small patch on a shell just outside the blob.

    Uses the generator's recorded radius and offset. Spikes cross this shell,
    smooth blobs do not, so the statistic separates the classes without any
    learning.
    """
    meta = pair.meta
    scale = np.array(meta["scale"])
    shape = pair.small.shape
    center = np.array([-window_start(0, n) for n in shape], dtype=float)
    coords = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij"), axis=-1)
    rel = (coords - center) / scale - np.array(meta["offset"])
    dist = np.linalg.norm(rel, axis=-1)
    r = meta["radius"]
    shell = (dist >= inner * r) & (dist <= outer * r)
    gx, gy = np.gradient(pair.small.astype(np.float64), axis=(0, 1))
    magnitude = np.hypot(gx, gy)
    return float(magnitude[shell].mean()) if shell.any() else 0.0
