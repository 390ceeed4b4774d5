"""Location quantization: object centroid and scale as vocabulary tokens.

Bins are 1-indexed in descriptors; token ids are 0-indexed offsets into the
extended vocabulary.  The location segments are always 256 + 256 + 256 + 128
= 896 ids wide, and smaller position-bin counts use a prefix of each 256-slot
segment.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from avi.geometry import AABB, VoxelGrid, as_cloud, bounding_box, devoxelize, voxelize

POSITION_SLOTS = 256
SCALE_SLOTS = 128
LOCATION_TOKENS = 3 * POSITION_SLOTS + SCALE_SLOTS


class QuantizationError(ValueError):
    pass


@dataclass(frozen=True)
class QuantConfig:
    position_bins: int = 256
    scale_bins: int = 128
    workspace: AABB = field(default_factory=AABB.unit)
    lq_enabled: bool = True

    def __post_init__(self):
        if not 2 <= self.position_bins <= POSITION_SLOTS:
            raise QuantizationError(f"position_bins must be in [2, 256], got {self.position_bins}")
        if not 2 <= self.scale_bins <= SCALE_SLOTS:
            raise QuantizationError(f"scale_bins must be in [2, 128], got {self.scale_bins}")
        if self.workspace.degenerate:
            raise QuantizationError("workspace box is degenerate")

    @property
    def bin_width(self) -> np.ndarray:
        return self.workspace.extent / self.position_bins

    @property
    def max_edge(self) -> float:
        return float(self.workspace.extent.max())

    def to_json(self) -> dict:
        return {
            "position_bins": self.position_bins,
            "scale_bins": self.scale_bins,
            "workspace": self.workspace.to_json(),
            "lq_enabled": self.lq_enabled,
        }

    @classmethod
    def from_json(cls, obj: dict) -> QuantConfig:
        ws = AABB.from_json(obj["workspace"]) if "workspace" in obj else AABB.unit()
        return cls(
            position_bins=int(obj.get("position_bins", 256)),
            scale_bins=int(obj.get("scale_bins", 128)),
            workspace=ws,
            lq_enabled=bool(obj.get("lq_enabled", True)),
        )


@dataclass(frozen=True)
class LocationDescriptor:
    x_bin: int
    y_bin: int
    z_bin: int
    s_bin: int

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_bin, self.y_bin, self.z_bin, self.s_bin)

    def shifted(self, dx: int = 0, dy: int = 0, dz: int = 0) -> LocationDescriptor:
        return LocationDescriptor(self.x_bin + dx, self.y_bin + dy, self.z_bin + dz, self.s_bin)

    def check(self, cfg: QuantConfig) -> None:
        for name, b in zip("xyz", self.as_tuple()[:3]):
            if not 1 <= b <= cfg.position_bins:
                raise QuantizationError(f"{name}_bin {b} outside 1..{cfg.position_bins}")
        if not 1 <= self.s_bin <= cfg.scale_bins:
            raise QuantizationError(f"s_bin {self.s_bin} outside 1..{cfg.scale_bins}")


@dataclass(frozen=True)
class Vocabulary:
    """Segment layout of the extended vocabulary.

    ``[text | pos-x | pos-y | pos-z | scale | shape | SEP, SEP2]``
    """

    base_size: int
    codebook_size: int

    @property
    def pos_x(self) -> int:
        return self.base_size

    @property
    def pos_y(self) -> int:
        return self.base_size + POSITION_SLOTS

    @property
    def pos_z(self) -> int:
        return self.base_size + 2 * POSITION_SLOTS

    @property
    def scale(self) -> int:
        return self.base_size + 3 * POSITION_SLOTS

    @property
    def shape(self) -> int:
        return self.base_size + LOCATION_TOKENS

    @property
    def location_size(self) -> int:
        return LOCATION_TOKENS

    @property
    def position_size(self) -> int:
        return 3 * POSITION_SLOTS

    @property
    def scale_size(self) -> int:
        return SCALE_SLOTS

    @property
    def size(self) -> int:
        """Ids covered by the text, location and shape segments."""
        return self.shape + self.codebook_size

    # separator ids sit just past the last segment so they never collide
    @property
    def sep(self) -> int:
        return self.size

    @property
    def sep2(self) -> int:
        return self.size + 1

    def segments(self) -> dict[str, tuple[int, int]]:
        return {
            "text": (0, self.base_size),
            "pos_x": (self.pos_x, self.pos_x + POSITION_SLOTS),
            "pos_y": (self.pos_y, self.pos_y + POSITION_SLOTS),
            "pos_z": (self.pos_z, self.pos_z + POSITION_SLOTS),
            "scale": (self.scale, self.scale + SCALE_SLOTS),
            "shape": (self.shape, self.shape + self.codebook_size),
        }

    def is_text(self, token: int) -> bool:
        return 0 <= token < self.base_size


def extend_vocabulary(base_size: int, codebook_size: int) -> Vocabulary:
    if base_size < 1:
        raise QuantizationError("base vocabulary must hold at least one id")
    if codebook_size < 2:
        raise QuantizationError("codebook must hold at least two entries")
    return Vocabulary(base_size, codebook_size)


def _position_bins(point, cfg: QuantConfig) -> np.ndarray:
    rel = (np.asarray(point, dtype=float) - cfg.workspace.min) / cfg.workspace.extent
    return np.clip(np.floor(rel * cfg.position_bins), 0, cfg.position_bins - 1).astype(int) + 1


def quantize_point(point, s_bin: int, cfg: QuantConfig) -> LocationDescriptor:
    """Descriptor for a centroid given directly, with a known scale bin."""
    p = np.asarray(point, dtype=float)
    if not cfg.workspace.contains(p[None])[0]:
        raise QuantizationError(f"centroid {p} outside workspace")
    x, y, z = _position_bins(p, cfg)
    return LocationDescriptor(int(x), int(y), int(z), int(s_bin))


def scale_bin(scale_fraction: float, cfg: QuantConfig) -> int:
    return int(np.clip(math.floor(scale_fraction * cfg.scale_bins), 0, cfg.scale_bins - 1)) + 1


def quantize_location(cloud, cfg: QuantConfig) -> LocationDescriptor:
    pts = as_cloud(cloud)
    if len(pts) == 0:
        raise QuantizationError("cannot quantize an empty cloud")
    centroid = pts.mean(axis=0)
    s = float(bounding_box(pts).extent.max()) / cfg.max_edge
    return quantize_point(centroid, scale_bin(s, cfg), cfg)


def dequantize_location(desc: LocationDescriptor, cfg: QuantConfig) -> tuple[np.ndarray, float]:
    """Bin-center centroid (meters) and scale fraction of a descriptor."""
    desc.check(cfg)
    bins = np.array(desc.as_tuple()[:3], dtype=float)
    centroid = cfg.workspace.min + (bins - 0.5) / cfg.position_bins * cfg.workspace.extent
    return centroid, (desc.s_bin - 0.5) / cfg.scale_bins


def tokens_of(desc: LocationDescriptor, vocab: Vocabulary) -> list[int]:
    x, y, z, s = desc.as_tuple()
    if not all(1 <= b <= POSITION_SLOTS for b in (x, y, z)) or not 1 <= s <= SCALE_SLOTS:
        raise QuantizationError(f"descriptor {desc} outside token segments")
    return [vocab.pos_x + x - 1, vocab.pos_y + y - 1, vocab.pos_z + z - 1, vocab.scale + s - 1]


def descriptor_of(tokens, vocab: Vocabulary) -> LocationDescriptor:
    toks = [int(t) for t in tokens]
    if len(toks) != 4:
        raise QuantizationError(f"location needs 4 tokens, got {len(toks)}")
    starts = (vocab.pos_x, vocab.pos_y, vocab.pos_z, vocab.scale)
    widths = (POSITION_SLOTS, POSITION_SLOTS, POSITION_SLOTS, SCALE_SLOTS)
    bins = []
    for name, tok, start, width in zip(("x", "y", "z", "s"), toks, starts, widths):
        if not start <= tok < start + width:
            raise QuantizationError(f"token {tok} is not a {name} location token")
        bins.append(tok - start + 1)
    return LocationDescriptor(*bins)


def effective_resolution(cfg: QuantConfig, voxel_resolution: int, s: float) -> int:
    """World-space resolution ``max(B, ceil(V/s))``, or ``ceil(V/s)`` without LQ."""
    if voxel_resolution < 2:
        raise QuantizationError("voxel resolution must be >= 2")
    if not 0 < s <= 1:
        raise QuantizationError(f"scale fraction must be in (0, 1], got {s}")
    object_res = math.ceil(voxel_resolution / s)
    return max(cfg.position_bins, object_res) if cfg.lq_enabled else object_res


def table1_rows(voxel_resolution: int = 64) -> list[tuple[str, int]]:
    rows = [("No LQ", effective_resolution(QuantConfig(lq_enabled=False), voxel_resolution, 1.0))]
    for b in (64, 128, 256):
        rows.append((f"LQ ({b})", effective_resolution(QuantConfig(position_bins=b), voxel_resolution, 1.0)))
    return rows


# -- object frame ------------------------------------------------------------


def object_box(desc: LocationDescriptor, cfg: QuantConfig) -> AABB:
    """Cube an object's shape grid lives in: decoded scale, centered on the decoded centroid."""
    centroid, frac = dequantize_location(desc, cfg)
    return AABB.cube(centroid, frac * cfg.max_edge)


def object_grid(cloud, desc: LocationDescriptor, cfg: QuantConfig, resolution: int = 64) -> VoxelGrid:
    """Voxelize an object into its descriptor cube.

    Points sticking out of the cube (the decoded scale rounds to a bin
    center and the centroid need not be the box center) are clamped onto it.
    """
    box = object_box(desc, cfg)
    pts = np.clip(as_cloud(cloud), box.min, box.max)
    return voxelize(pts, box, resolution)


def compose_scene(segments, cfg: QuantConfig, diagnostics: dict | None = None) -> np.ndarray:
    """Union of decoded objects in world coordinates.

    ``segments`` is a sequence of ``(VoxelGrid, LocationDescriptor)``.  Points
    outside the workspace are clipped away; the indices of objects that lost
    points are listed under ``diagnostics["clipped"]``.
    """
    clouds = []
    clipped = []
    for i, (grid, desc) in enumerate(segments):
        pts = devoxelize(grid, object_box(desc, cfg))
        inside = cfg.workspace.contains(pts)
        if not inside.all():
            clipped.append(i)
            pts = pts[inside]
        clouds.append(pts)
    if diagnostics is not None:
        diagnostics["clipped"] = clipped
    return np.concatenate(clouds) if clouds else np.zeros((0, 3))


# -- token streams -------------------------------------------------------------


def format_tokens(tokens, comments: list[str] | None = None) -> str:
    lines = [f"# {c}" for c in comments or []]
    lines += [str(int(t)) for t in tokens]
    return "\n".join(lines) + "\n"


def parse_tokens(text: str) -> tuple[list[int], list[str]]:
    """Ids and comment lines (without the leading ``#``) of a token stream."""
    tokens, comments = [], []
    for line in text.splitlines():
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            comments.append(s[1:].strip())
        else:
            tokens.append(int(s))
    return tokens, comments


def read_tokens(path) -> list[int]:
    return parse_tokens(Path(path).read_text())[0]


def load_quant_config(path) -> QuantConfig:
    return QuantConfig.from_json(json.loads(Path(path).read_text()))
