"""Patch-quantized shape tokenizer: a 64^3 grid becomes 8192 codebook ids.

The grid is cut into 4x4x2 voxel patches (a 16x16x32 patch lattice).  Each
patch is a 32-bit occupancy vector that is replaced by its nearest codeword.
Codeword 0 is the empty patch and codeword 1 the full patch.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from avi.geometry import VoxelGrid

log = logging.getLogger(__name__)

GRID_RESOLUTION = 64
PATCH_SHAPE = (4, 4, 2)
PATCH_GRID = tuple(GRID_RESOLUTION // s for s in PATCH_SHAPE)
PATCH_DIM = int(np.prod(PATCH_SHAPE))
NUM_PATCHES = int(np.prod(PATCH_GRID))

_BIT_WEIGHTS = (1 << np.arange(PATCH_DIM, dtype=np.uint64)).astype(np.uint64)


class TokenizerError(ValueError):
    pass


@dataclass(frozen=True)
class PatchLayout:
    grid_resolution: int = GRID_RESOLUTION
    patch_shape: tuple[int, int, int] = PATCH_SHAPE

    def __post_init__(self):
        if any(self.grid_resolution % s for s in self.patch_shape):
            raise TokenizerError(f"patch shape {self.patch_shape} does not divide {self.grid_resolution}")

    @property
    def patch_grid(self) -> tuple[int, int, int]:
        return tuple(self.grid_resolution // s for s in self.patch_shape)

    @property
    def patches_total(self) -> int:
        return int(np.prod(self.patch_grid))

    @property
    def patch_dim(self) -> int:
        return int(np.prod(self.patch_shape))


DEFAULT_LAYOUT = PatchLayout()


def patch_vectors(grid: VoxelGrid, layout: PatchLayout = DEFAULT_LAYOUT) -> np.ndarray:
    """All patch vectors, shape ``(patches_total, patch_dim)``, uint8 bits."""
    if grid.resolution != layout.grid_resolution:
        raise TokenizerError(f"grid resolution {grid.resolution} != {layout.grid_resolution}")
    (gx, gy, gz), (sx, sy, sz) = layout.patch_grid, layout.patch_shape
    blocks = grid.occupancy.reshape(gx, sx, gy, sy, gz, sz).transpose(0, 2, 4, 1, 3, 5)
    return blocks.reshape(layout.patches_total, layout.patch_dim).astype(np.uint8)


def patch_vector(grid: VoxelGrid, patch_index: int, layout: PatchLayout = DEFAULT_LAYOUT) -> np.ndarray:
    if not 0 <= patch_index < layout.patches_total:
        raise TokenizerError(f"patch index {patch_index} out of range")
    return patch_vectors(grid, layout)[patch_index]


def assemble_patches(vectors: np.ndarray, layout: PatchLayout = DEFAULT_LAYOUT) -> VoxelGrid:
    """Inverse of :func:`patch_vectors`."""
    (gx, gy, gz), (sx, sy, sz) = layout.patch_grid, layout.patch_shape
    blocks = np.asarray(vectors, dtype=bool).reshape(gx, gy, gz, sx, sy, sz).transpose(0, 3, 1, 4, 2, 5)
    return VoxelGrid(blocks.reshape((layout.grid_resolution,) * 3))


@dataclass(frozen=True, eq=False)
class Codebook:
    entries: np.ndarray
    warnings: tuple[str, ...] = field(default=())

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        if e.ndim != 2 or len(e) < 2:
            raise TokenizerError("codebook needs at least two 2-D entries")
        if not np.all(np.isfinite(e)) or e.min() < 0 or e.max() > 1:
            raise TokenizerError("codebook components must be finite and in [0, 1]")
        if np.any(e[0] != 0) or np.any(e[1] != 1):
            raise TokenizerError("entries 0 and 1 must be the empty and full patches")
        object.__setattr__(self, "entries", e)

    @property
    def k(self) -> int:
        return len(self.entries)

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    @property
    def flagged(self) -> bool:
        return bool(self.warnings)

    def __eq__(self, other) -> bool:
        return isinstance(other, Codebook) and np.array_equal(self.entries, other.entries)

    def to_json(self) -> dict:
        entries = [[int(v) if float(v).is_integer() else float(v) for v in row] for row in self.entries]
        return {"k": self.k, "dim": self.dim, "entries": entries}

    @classmethod
    def from_json(cls, obj: dict) -> Codebook:
        entries = np.array(obj["entries"], dtype=float)
        if entries.shape != (obj["k"], obj["dim"]):
            raise TokenizerError(f"codebook shape {entries.shape} disagrees with k/dim header")
        return cls(entries)


def _reserved(dim: int) -> np.ndarray:
    return np.stack([np.zeros(dim), np.ones(dim)])


def _kmeans_pp(points, weights, k, rng) -> np.ndarray:
    n = len(points)
    centers = np.empty((k, points.shape[1]))
    first = rng.choice(n, p=weights / weights.sum())
    centers[0] = points[first]
    closest = ((points - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        pot = weights * closest
        total = pot.sum()
        idx = rng.choice(n, p=pot / total) if total > 0 else int(np.argmax(weights))
        centers[c] = points[idx]
        closest = np.minimum(closest, ((points - centers[c]) ** 2).sum(axis=1))
    return centers


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (points**2).sum(1)[:, None] - 2.0 * points @ centers.T + (centers**2).sum(1)[None, :]
    return np.maximum(d, 0.0)


def weighted_kmeans(points, weights, k: int, seed: int, max_iter: int = 100, rel_tol: float = 1e-6):
    """Lloyd iterations with k-means++ seeding; returns ``(centers, labels)``."""
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(points, weights, k, rng)
    prev = None
    for _ in range(max_iter):
        d = _sq_dists(points, centers)
        labels = d.argmin(axis=1)
        best = d[np.arange(len(points)), labels]
        inertia = float((weights * best).sum())
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, weights[:, None] * points)
        mass = np.bincount(labels, weights=weights, minlength=k)
        empty = mass == 0
        centers = np.where(empty[:, None], centers, sums / np.maximum(mass, 1e-300)[:, None])
        if empty.any():
            # reseed empty clusters on the worst-served points, deterministically
            order = np.argsort(-(weights * best), kind="stable")
            centers[empty] = points[order[: empty.sum()]]
        if prev is not None and abs(prev - inertia) <= rel_tol * max(prev, 1e-300):
            break
        prev = inertia
    labels = _sq_dists(points, centers).argmin(axis=1)
    return centers, labels


def train_codebook(grids, k: int = 512, seed: int = 0, layout: PatchLayout = DEFAULT_LAYOUT) -> Codebook:
    """Fit ``k - 2`` codewords to the non-trivial patches of ``grids``.

    Clustering runs over distinct patch patterns weighted by their counts.
    Each cluster is then represented by the member pattern nearest its mean, so
    every codeword is a binary patch and decoding followed by encoding is a
    fixed point.
    """
    if k < 2:
        raise TokenizerError("codebook size must be >= 2")
    dim = layout.patch_dim
    codes = []
    for g in grids:
        vec = patch_vectors(g, layout).astype(np.uint64)
        codes.append(vec @ _BIT_WEIGHTS)
    codes = np.concatenate(codes) if codes else np.zeros(0, dtype=np.uint64)
    full_code = np.uint64((1 << dim) - 1)
    codes = codes[(codes != 0) & (codes != full_code)]
    uniq, counts = np.unique(codes, return_counts=True)
    patterns = ((uniq[:, None] >> np.arange(dim, dtype=np.uint64)) & np.uint64(1)).astype(np.float64)
    want = k - 2
    warnings: list[str] = []

    if len(uniq) <= want:
        chosen = patterns
    else:
        weights = counts.astype(np.float64)
        centers, labels = weighted_kmeans(patterns, weights, want, seed)
        chosen = []
        for c in range(want):
            members = np.flatnonzero(labels == c)
            if len(members) == 0:
                continue
            d = ((patterns[members] - centers[c]) ** 2).sum(axis=1)
            # nearest member; ties prefer the more frequent, then the smaller code
            best = min(members[d == d.min()], key=lambda m: (-counts[m], uniq[m]))
            chosen.append(best)
        chosen = np.array(sorted(set(chosen)), dtype=int)
        chosen = patterns[chosen]

    if len(chosen) < want:
        msg = f"only {len(chosen)} distinct patch codewords for {want} slots; padded with copies"
        warnings.append(msg)
        log.warning(msg)
        pad = np.zeros((want - len(chosen), dim))
        chosen = np.concatenate([chosen.reshape(-1, dim), pad])
    entries = np.concatenate([_reserved(dim), chosen])
    return Codebook(entries, tuple(warnings))


def encode_grid(grid: VoxelGrid, codebook: Codebook, layout: PatchLayout = DEFAULT_LAYOUT) -> np.ndarray:
    """Nearest-codeword id per patch; ties go to the lowest id."""
    vec = patch_vectors(grid, layout)
    if codebook.dim != layout.patch_dim:
        raise TokenizerError(f"codebook dim {codebook.dim} != patch dim {layout.patch_dim}")
    bits = vec.sum(axis=1)
    # empty/full patches sit at distance 0 from reserved entries 0/1, the lowest possible ids
    tokens = np.where(bits == 0, 0, 1).astype(np.int64)
    mixed = np.flatnonzero((bits > 0) & (bits < layout.patch_dim))
    if len(mixed):
        d = _sq_dists(vec[mixed].astype(np.float64), codebook.entries)
        tokens[mixed] = d.argmin(axis=1)
    return tokens


def check_tokens(tokens, codebook: Codebook, layout: PatchLayout = DEFAULT_LAYOUT) -> np.ndarray:
    toks = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if len(toks) != layout.patches_total:
        raise TokenizerError(f"expected {layout.patches_total} shape tokens, got {len(toks)}")
    if toks.min() < 0 or toks.max() >= codebook.k:
        raise TokenizerError(f"shape token out of range [0, {codebook.k})")
    return toks


def decode_grid(tokens, codebook: Codebook, layout: PatchLayout = DEFAULT_LAYOUT) -> VoxelGrid:
    toks = check_tokens(tokens, codebook, layout)
    return assemble_patches(codebook.entries[toks] >= 0.5, layout)


def save_codebook(codebook: Codebook, path) -> None:
    Path(path).write_text(json.dumps(codebook.to_json()))


def load_codebook(path) -> Codebook:
    return Codebook.from_json(json.loads(Path(path).read_text()))
