"""Synthetic primitives (boxes, spheres, cylinders) and the default shape codebook."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from avi.geometry import VoxelGrid, rotation_about_axis
from avi.locquant import QuantConfig, object_grid, quantize_location
from avi.vqtok import Codebook, train_codebook

KINDS = ("box", "sphere", "cylinder")


def sample_surface(kind: str, dims, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points on the surface of a primitive centered at the origin.

    ``dims`` are full extents along x, y, z.  Sampling is area-weighted.
    """
    a, b, c = (np.asarray(dims, dtype=float) / 2.0).tolist()
    if kind == "box":
        areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
        face = rng.choice(6, size=n, p=areas / areas.sum())
        pts = rng.uniform(-1, 1, size=(n, 3)) * [a, b, c]
        axis = face // 2
        sign = np.where(face % 2 == 0, -1.0, 1.0)
        pts[np.arange(n), axis] = sign * np.array([a, b, c])[axis]
        return pts
    if kind == "sphere":
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d * [a, b, c]
    if kind == "cylinder":
        # axis along z; caps and side weighted by (circular) area
        r = min(a, b)
        side, cap = 2 * np.pi * r * 2 * c, np.pi * r * r
        part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
        theta = rng.uniform(0, 2 * np.pi, n)
        rad = np.where(part == 0, r, r * np.sqrt(rng.uniform(0, 1, n)))
        z = np.where(part == 0, rng.uniform(-c, c, n), np.where(part == 1, -c, c))
        return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)
    raise ValueError(f"unknown primitive {kind!r}")


def solid_grid(kind: str, dims, resolution: int = 64) -> VoxelGrid:
    """Filled primitive with fractional extents ``dims`` (<= 1) centered in the grid."""
    half = np.asarray(dims, dtype=float) / 2.0
    c = (np.arange(resolution) + 0.5) / resolution - 0.5
    x, y, z = np.meshgrid(c, c, c, indexing="ij")
    if kind == "box":
        occ = (abs(x) <= half[0]) & (abs(y) <= half[1]) & (abs(z) <= half[2])
    elif kind == "sphere":
        occ = (x / half[0]) ** 2 + (y / half[1]) ** 2 + (z / half[2]) ** 2 <= 1.0
    elif kind == "cylinder":
        r = min(half[0], half[1])
        occ = (x**2 + y**2 <= r * r) & (abs(z) <= half[2])
    else:
        raise ValueError(f"unknown primitive {kind!r}")
    return VoxelGrid(occ)


def random_solid(rng: np.random.Generator, resolution: int = 64) -> VoxelGrid:
    kind = KINDS[rng.integers(len(KINDS))]
    return solid_grid(kind, rng.uniform(0.35, 1.0, 3), resolution)


def random_object(rng: np.random.Generator, size_range=(0.08, 0.16), points_range=(200, 2000)):
    """Surface-sampled primitive with random kind, extents, yaw and point count."""
    kind = KINDS[rng.integers(len(KINDS))]
    dims = rng.uniform(*size_range, 3)
    n = int(rng.integers(points_range[0], points_range[1] + 1))
    pts = sample_surface(kind, dims, n, rng)
    rot = rotation_about_axis([0, 0, 1], rng.uniform(0, 2 * np.pi))
    return kind, pts @ rot.T


def surface_grid(rng: np.random.Generator, cfg: QuantConfig | None = None) -> VoxelGrid:
    """Object-frame grid of a random surface-sampled primitive."""
    cfg = cfg or QuantConfig()
    _, pts = random_object(rng)
    pts = pts + cfg.workspace.center
    return object_grid(pts, quantize_location(pts, cfg), cfg)


def training_grids(seed: int = 0, n_surface: int = 48, n_solid: int = 24) -> list[VoxelGrid]:
    rng = np.random.default_rng(seed)
    grids = [surface_grid(rng) for _ in range(n_surface)]
    grids += [random_solid(rng) for _ in range(n_solid)]
    return grids


@lru_cache(maxsize=4)
def default_codebook(k: int = 512, seed: int = 0) -> Codebook:
    """Codebook trained on the synthetic primitive family; deterministic per ``(k, seed)``."""
    return train_codebook(training_grids(seed), k=k, seed=seed)
