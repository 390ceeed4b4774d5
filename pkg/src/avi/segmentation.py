"""Depth + instance masks -> per-object point clouds with location descriptors."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from avi.geometry import AABB, Pose, apply_transform
from avi.locquant import LocationDescriptor, QuantConfig, quantize_location

log = logging.getLogger(__name__)

DEPTH_MAGIC = b"AVID"
MASK_MAGIC = b"AVIM"


class SegmentationError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise SegmentationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise SegmentationError("principal point outside the image")


@dataclass(frozen=True, eq=False)
class DepthImage:
    depth: np.ndarray  # (height, width) meters, 0 = invalid

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        if d.ndim != 2:
            raise SegmentationError("depth must be a 2-D array")
        if not np.all(np.isfinite(d)) or d.min(initial=0.0) < 0:
            raise SegmentationError("depth values must be finite and >= 0")
        object.__setattr__(self, "depth", d)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


@dataclass(frozen=True, eq=False)
class MaskSet:
    labels: np.ndarray  # (height, width) ints, 0 = background

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2 or not np.issubdtype(lab.dtype, np.integer):
            raise SegmentationError("mask labels must be a 2-D integer array")
        if lab.min(initial=0) < 0:
            raise SegmentationError("mask labels must be >= 0")
        object.__setattr__(self, "labels", lab.astype(np.int64))

    @property
    def count(self) -> int:
        return int(self.labels.max(initial=0))


@dataclass(frozen=True, eq=False)
class ObjectSegment:
    id: int
    cloud: np.ndarray
    descriptor: LocationDescriptor
    pixels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


@dataclass(eq=False)
class SceneDecomposition:
    segments: list[ObjectSegment]
    workspace: AABB
    dropped: list[int] = field(default_factory=list)
    outside_workspace: int = 0
    warnings: list[str] = field(default_factory=list)

    def segment(self, object_id: int) -> ObjectSegment | None:
        for s in self.segments:
            if s.id == object_id:
                return s
        return None


def _pixel_rays(depth: DepthImage, intrinsics: CameraIntrinsics):
    if (depth.width, depth.height) != (intrinsics.width, intrinsics.height):
        raise SegmentationError(
            f"depth is {depth.width}x{depth.height} but intrinsics say {intrinsics.width}x{intrinsics.height}"
        )
    flat = depth.depth.reshape(-1)
    valid = np.flatnonzero(flat > 0)
    v, u = np.divmod(valid, depth.width)
    d = flat[valid]
    cam = np.stack([d * (u - intrinsics.cx) / intrinsics.fx, d * (v - intrinsics.cy) / intrinsics.fy, d], axis=1)
    return valid, cam


def unproject(depth: DepthImage, intrinsics: CameraIntrinsics, camera_pose: Pose) -> np.ndarray:
    """World points of all valid pixels in row-major pixel order."""
    _, cam = _pixel_rays(depth, intrinsics)
    return apply_transform(cam, camera_pose.as_transform())


def lift_masks(
    depth: DepthImage,
    intrinsics: CameraIntrinsics,
    camera_pose: Pose,
    masks: MaskSet,
    workspace: AABB,
    cfg: QuantConfig | None = None,
) -> SceneDecomposition:
    if masks.labels.shape != depth.depth.shape:
        raise SegmentationError(f"mask shape {masks.labels.shape} != depth shape {depth.depth.shape}")
    if masks.count < 1:
        raise SegmentationError("mask set has no objects")
    cfg = cfg or QuantConfig(workspace=workspace)
    pix, world = _pixel_rays(depth, intrinsics)
    world = apply_transform(world, camera_pose.as_transform())
    labels = masks.labels.reshape(-1)[pix]
    inside = workspace.contains(world)
    out = SceneDecomposition([], workspace, outside_workspace=int((~inside & (labels > 0)).sum()))
    for k in range(1, masks.count + 1):
        sel = (labels == k) & inside
        if not sel.any():
            if (masks.labels == k).any():
                out.dropped.append(k)
                out.warnings.append(f"object {k} has no valid points inside the workspace")
            continue
        cloud = world[sel]
        out.segments.append(ObjectSegment(k, cloud, quantize_location(cloud, cfg), pix[sel]))
    for w in out.warnings:
        log.warning(w)
    if not out.segments:
        raise SegmentationError("every segment is empty after lifting")
    return out


# -- file formats ----------------------------------------------------------------


def _image_bytes(magic: bytes, arr: np.ndarray, dtype: str) -> bytes:
    h, w = arr.shape
    return magic + struct.pack("<III", w, h, 0) + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def _image_from_bytes(data: bytes, magic: bytes, dtype: str) -> np.ndarray:
    if len(data) < 16 or data[:4] != magic:
        raise SegmentationError(f"bad magic, expected {magic!r}")
    w, h, _ = struct.unpack("<III", data[4:16])
    arr = np.frombuffer(data, dtype=dtype, offset=16)
    if arr.size != w * h:
        raise SegmentationError(f"payload holds {arr.size} values, header says {w}x{h}")
    return arr.reshape(h, w)


def depth_to_bytes(depth: DepthImage) -> bytes:
    return _image_bytes(DEPTH_MAGIC, depth.depth, "<f4")


def depth_from_bytes(data: bytes) -> DepthImage:
    return DepthImage(_image_from_bytes(data, DEPTH_MAGIC, "<f4").astype(np.float64))


def masks_to_bytes(masks: MaskSet) -> bytes:
    if masks.labels.max(initial=0) > 0xFFFF:
        raise SegmentationError("labels exceed u16")
    return _image_bytes(MASK_MAGIC, masks.labels, "<u2")


def masks_from_bytes(data: bytes) -> MaskSet:
    return MaskSet(_image_from_bytes(data, MASK_MAGIC, "<u2").astype(np.int64))


def camera_to_json(intrinsics: CameraIntrinsics, pose: Pose) -> dict:
    return {
        "fx": intrinsics.fx,
        "fy": intrinsics.fy,
        "cx": intrinsics.cx,
        "cy": intrinsics.cy,
        "width": intrinsics.width,
        "height": intrinsics.height,
        "position": pose.position.tolist(),
        "orientation_wxyz": pose.orientation.tolist(),
    }


def camera_from_json(obj: dict) -> tuple[CameraIntrinsics, Pose]:
    intr = CameraIntrinsics(
        float(obj["fx"]), float(obj["fy"]), float(obj["cx"]), float(obj["cy"]), int(obj["width"]), int(obj["height"])
    )
    return intr, Pose(np.array(obj["position"], dtype=float), np.array(obj["orientation_wxyz"], dtype=float))


def load_camera(path) -> tuple[CameraIntrinsics, Pose]:
    return camera_from_json(json.loads(Path(path).read_text()))
