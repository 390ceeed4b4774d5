"""Point clouds, boxes, rigid transforms, poses and voxel grids.

Point clouds are plain ``(N, 3)`` float64 numpy arrays in meters. The other
types are small frozen dataclasses around numpy arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ORTHO_TOL = 1e-9
VOXEL_MAGIC = b"AVIV"


class GeometryError(ValueError):
    pass


def as_cloud(points) -> np.ndarray:
    """Coerce ``points`` to a finite ``(N, 3)`` float64 array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 3))
    arr = arr.reshape(-1, 3) if arr.ndim == 1 else arr
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise GeometryError(f"expected (N, 3) points, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError("point cloud contains non-finite coordinates")
    return arr


@dataclass(frozen=True, eq=False)
class AABB:
    min: np.ndarray
    max: np.ndarray

    def __eq__(self, other) -> bool:
        return isinstance(other, AABB) and np.array_equal(self.min, other.min) and np.array_equal(self.max, other.max)

    def __hash__(self) -> int:
        return hash((tuple(self.min), tuple(self.max)))

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max, dtype=np.float64).reshape(3)
        if np.any(lo > hi):
            raise GeometryError(f"box min {lo} exceeds max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @classmethod
    def unit(cls) -> AABB:
        return cls(np.zeros(3), np.ones(3))

    @classmethod
    def cube(cls, center, edge: float) -> AABB:
        c = np.asarray(center, dtype=np.float64)
        return cls(c - edge / 2.0, c + edge / 2.0)

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return (self.min + self.max) / 2.0

    @property
    def degenerate(self) -> bool:
        return bool(np.any(self.extent <= 0))

    def contains(self, points) -> np.ndarray:
        """Closed-box membership mask for each point."""
        pts = as_cloud(points)
        return np.all((pts >= self.min) & (pts <= self.max), axis=1)

    def overlaps(self, other: AABB) -> bool:
        """True when the open interiors intersect (touching faces do not count)."""
        return bool(np.all(self.min < other.max) and np.all(other.min < self.max))

    def to_json(self) -> dict:
        return {"min": self.min.tolist(), "max": self.max.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> AABB:
        return cls(np.array(obj["min"], dtype=float), np.array(obj["max"], dtype=float))


def _check_rotation(rot: np.ndarray) -> None:
    if rot.shape != (3, 3) or not np.all(np.isfinite(rot)):
        raise GeometryError("rotation must be a finite 3x3 matrix")
    if np.max(np.abs(rot.T @ rot - np.eye(3))) > ORTHO_TOL:
        raise GeometryError("rotation is not orthonormal")
    if abs(np.linalg.det(rot) - 1.0) > ORTHO_TOL:
        raise GeometryError("rotation has determinant != +1")


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(rot)
        if not np.all(np.isfinite(trans)):
            raise GeometryError("translation must be finite")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_translation(cls, t) -> RigidTransform:
        return cls(np.eye(3), np.asarray(t, dtype=float))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to_json(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> RigidTransform:
        return cls(np.array(obj["rotation"], dtype=float), np.array(obj["translation"], dtype=float))


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for ``angle`` radians about ``axis``."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    k = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def rotation_angle(rot: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    c = (np.trace(rot) - 1.0) / 2.0
    s = np.linalg.norm([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]) / 2.0
    return float(np.arctan2(s, c))


def quat_from_matrix(rot: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0 for a rotation matrix."""
    m = np.asarray(rot, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a ⊗ b`` of (w, x, y, z) quaternions."""
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


@dataclass(frozen=True)
class Pose:
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        p = np.asarray(self.position, dtype=np.float64).reshape(3)
        q = np.asarray(self.orientation, dtype=np.float64).reshape(4)
        if abs(np.linalg.norm(q) - 1.0) > ORTHO_TOL:
            raise GeometryError("pose orientation must be a unit quaternion")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", q)

    def as_transform(self) -> RigidTransform:
        return RigidTransform(quat_to_matrix(self.orientation), self.position)

    def to_json(self) -> dict:
        return {"position": self.position.tolist(), "orientation_wxyz": self.orientation.tolist()}


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Binary occupancy indexed ``[i, j, k]`` (x-major flattening)."""

    occupancy: np.ndarray

    def __post_init__(self):
        occ = np.asarray(self.occupancy, dtype=bool)
        if occ.ndim != 3 or len(set(occ.shape)) != 1 or occ.shape[0] < 2:
            raise GeometryError(f"voxel grid must be cubic with resolution >= 2, got {occ.shape}")
        object.__setattr__(self, "occupancy", occ)

    @classmethod
    def empty(cls, resolution: int = 64) -> VoxelGrid:
        return cls(np.zeros((resolution,) * 3, dtype=bool))

    @classmethod
    def full(cls, resolution: int = 64) -> VoxelGrid:
        return cls(np.ones((resolution,) * 3, dtype=bool))

    @property
    def resolution(self) -> int:
        return self.occupancy.shape[0]

    @property
    def count(self) -> int:
        return int(self.occupancy.sum())

    def __eq__(self, other) -> bool:
        return isinstance(other, VoxelGrid) and np.array_equal(self.occupancy, other.occupancy)

    def iou(self, other: VoxelGrid) -> float:
        inter = np.logical_and(self.occupancy, other.occupancy).sum()
        union = np.logical_or(self.occupancy, other.occupancy).sum()
        return 1.0 if union == 0 else float(inter / union)


def bounding_box(cloud) -> AABB:
    pts = as_cloud(cloud)
    if len(pts) == 0:
        raise GeometryError("bounding box of an empty cloud")
    return AABB(pts.min(axis=0), pts.max(axis=0))


def voxel_indices(cloud, box: AABB, resolution: int) -> np.ndarray:
    """Cell index of every point inside ``box``; points outside are dropped.

    Cells are half-open ``[min + i*w, min + (i+1)*w)``; points on the max
    face land in the last cell.
    """
    pts = as_cloud(cloud)
    pts = pts[box.contains(pts)]
    idx = np.floor((pts - box.min) / box.extent * resolution).astype(np.int64)
    return np.minimum(idx, resolution - 1)


def voxelize(cloud, box: AABB, resolution: int = 64) -> VoxelGrid:
    if box.degenerate:
        raise GeometryError("cannot voxelize into a degenerate box")
    if resolution < 2:
        raise GeometryError("resolution must be >= 2")
    occ = np.zeros((resolution,) * 3, dtype=bool)
    idx = voxel_indices(cloud, box, resolution)
    occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return VoxelGrid(occ)


def devoxelize(grid: VoxelGrid, box: AABB) -> np.ndarray:
    """Cell centers of the occupied voxels, in x-major index order."""
    idx = np.argwhere(grid.occupancy)
    w = box.extent / grid.resolution
    return box.min + (idx + 0.5) * w


def apply_transform(cloud, xf: RigidTransform) -> np.ndarray:
    pts = as_cloud(cloud)
    return pts @ xf.rotation.T + xf.translation


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform applying ``b`` first, then ``a``."""
    rot = a.rotation @ b.rotation
    return RigidTransform(_reorthonormalize(rot), a.rotation @ b.translation + a.translation)


def invert(a: RigidTransform) -> RigidTransform:
    rt = a.rotation.T
    return RigidTransform(rt, -rt @ a.translation)


def _reorthonormalize(rot: np.ndarray) -> np.ndarray:
    # products of many rotations drift; snap back onto SO(3)
    u, _, vt = np.linalg.svd(rot)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def apply_to_pose(xf: RigidTransform, pose: Pose) -> Pose:
    position = xf.rotation @ pose.position + xf.translation
    q = quat_multiply(quat_from_matrix(xf.rotation), pose.orientation)
    return Pose(position, q / np.linalg.norm(q))


# -- file formats ---------------------------------------------------------


def read_cloud(path) -> np.ndarray:
    """Read the whitespace ``x y z`` text format (``#`` comments allowed)."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise GeometryError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
        rows.append([float(v) for v in parts])
    return as_cloud(rows)


def format_cloud(cloud, comment: str | None = None) -> str:
    lines = [f"# {comment}"] if comment else []
    lines += [f"{x!r} {y!r} {z!r}" for x, y, z in as_cloud(cloud).tolist()]
    return "\n".join(lines) + "\n"


def grid_to_bytes(grid: VoxelGrid) -> bytes:
    header = VOXEL_MAGIC + struct.pack("<III", grid.resolution, 0, 0)
    bits = np.packbits(grid.occupancy.reshape(-1), bitorder="little")
    return header + bits.tobytes()


def grid_from_bytes(data: bytes) -> VoxelGrid:
    if len(data) < 16 or data[:4] != VOXEL_MAGIC:
        raise GeometryError("not a voxel grid file (bad magic)")
    (res, _, _) = struct.unpack("<III", data[4:16])
    n = res**3
    payload = np.frombuffer(data, dtype=np.uint8, offset=16)
    if res < 2 or len(payload) != (n + 7) // 8:
        raise GeometryError(f"voxel payload size mismatch for resolution {res}")
    bits = np.unpackbits(payload, bitorder="little")[:n]
    return VoxelGrid(bits.astype(bool).reshape(res, res, res))
