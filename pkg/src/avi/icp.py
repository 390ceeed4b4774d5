"""Rigid registration: paired SVD solve and point-to-point ICP."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from avi.geometry import RigidTransform, apply_transform, as_cloud, compose, invert
from avi.locquant import QuantConfig, compose_scene, dequantize_location


class RegistrationError(ValueError):
    pass


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    convergence_tol: float = 1e-8
    max_correspondence_distance: float = math.inf
    min_points: int = 3

    def __post_init__(self):
        if self.max_iterations < 1:
            raise RegistrationError("max_iterations must be >= 1")
        if self.convergence_tol <= 0 or self.max_correspondence_distance <= 0:
            raise RegistrationError("tolerances must be positive")

    def to_json(self) -> dict:
        dist = self.max_correspondence_distance
        return {
            "max_iterations": self.max_iterations,
            "convergence_tol": self.convergence_tol,
            "max_correspondence_distance": None if math.isinf(dist) else dist,
            "min_points": self.min_points,
        }

    @classmethod
    def from_json(cls, obj: dict) -> IcpConfig:
        dist = obj.get("max_correspondence_distance")
        return cls(
            max_iterations=int(obj.get("max_iterations", 50)),
            convergence_tol=float(obj.get("convergence_tol", 1e-8)),
            max_correspondence_distance=math.inf if dist is None else float(dist),
            min_points=int(obj.get("min_points", 3)),
        )


@dataclass
class IcpResult:
    transform: RigidTransform
    rmse: float
    iterations: int
    converged: bool
    history: list[float] = field(default_factory=list)
    reason: str = ""

    def to_json(self) -> dict:
        out = {
            "rotation": self.transform.rotation.tolist(),
            "translation": self.transform.translation.tolist(),
            "rmse": self.rmse if math.isfinite(self.rmse) else None,
            "iterations": self.iterations,
            "converged": self.converged,
        }
        if self.reason:
            out["reason"] = self.reason
        return out


def kabsch(source, target) -> RigidTransform:
    """Least-squares rotation and translation taking ``source[i]`` onto ``target[i]``."""
    x = as_cloud(source)
    y = as_cloud(target)
    if len(x) != len(y):
        raise RegistrationError(f"paired clouds differ in size: {len(x)} vs {len(y)}")
    if len(x) < 3:
        raise RegistrationError("kabsch needs at least 3 pairs")
    xc, yc = x.mean(axis=0), y.mean(axis=0)
    h = (x - xc).T @ (y - yc)
    u, s, vt = np.linalg.svd(h)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise RegistrationError(f"degenerate correspondence (singular values {s}); rotation is not determined")
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T))
    rot = v @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, yc - rot @ xc)


def brute_force_correspondences(source, target, max_dist: float = math.inf):
    """O(N*M) reference for :func:`nearest_correspondences`."""
    src, tgt = as_cloud(source), as_cloud(target)
    out = []
    for i, p in enumerate(src):
        d = np.sqrt(np.sum((tgt - p) ** 2, axis=1))
        j = int(np.argmin(d))
        if d[j] <= max_dist:
            out.append((i, j, float(d[j])))
    return out


class NearestNeighbors:
    """Exact nearest target point per query, lowest index on ties."""

    def __init__(self, target):
        self.points = as_cloud(target)
        if len(self.points) == 0:
            raise RegistrationError("empty target cloud")
        self.tree = cKDTree(self.points)

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        q = as_cloud(queries)
        k = min(2, len(self.points))
        dist, idx = self.tree.query(q, k=k)
        if k == 1:
            dist, idx = dist[:, None], idx[:, None]
        best = idx[:, 0].copy()
        # near-ties are resolved exactly against recomputed distances
        tie = np.flatnonzero(dist[:, -1] <= dist[:, 0] * (1 + 1e-9) + 1e-15) if k == 2 else []
        for i in tie:
            cand = np.array(sorted(self.tree.query_ball_point(q[i], dist[i, 0] * (1 + 1e-9) + 1e-15)))
            cd = np.sqrt(np.sum((self.points[cand] - q[i]) ** 2, axis=1))
            best[i] = cand[np.argmin(cd)]
        d = np.sqrt(np.sum((self.points[best] - q) ** 2, axis=1))
        return best, d


def nearest_correspondences(source, target, max_dist: float = math.inf):
    """``(source index, target index, distance)`` for each source point within ``max_dist``."""
    src = as_cloud(source)
    idx, d = NearestNeighbors(target).query(src)
    keep = np.flatnonzero(d <= max_dist)
    return [(int(i), int(idx[i]), float(d[i])) for i in keep]


def icp_align(source, target, cfg: IcpConfig | None = None, init: RigidTransform | None = None) -> IcpResult:
    """Point-to-point ICP; the result maps the original source frame onto the target.

    ``history`` holds the correspondence RMSE measured at the start of every
    iteration followed by the final RMSE.
    """
    cfg = cfg or IcpConfig()
    xf = init or RigidTransform.identity()
    src, tgt = as_cloud(source), as_cloud(target)
    if len(src) < cfg.min_points or len(tgt) < cfg.min_points:
        return IcpResult(xf, math.inf, 0, False, reason=f"fewer than {cfg.min_points} points in a cloud")
    nn = NearestNeighbors(tgt)

    def match(current):
        moved = apply_transform(src, current)
        idx, d = nn.query(moved)
        keep = d <= cfg.max_correspondence_distance
        rmse = float(np.sqrt(np.mean(d[keep] ** 2))) if keep.any() else math.inf
        return moved[keep], tgt[idx[keep]], rmse

    history: list[float] = []
    moved, paired, rmse = match(xf)
    for it in range(1, cfg.max_iterations + 1):
        history.append(rmse)
        if len(moved) < cfg.min_points:
            return IcpResult(xf, rmse, it - 1, False, history, f"only {len(moved)} correspondences")
        if rmse == 0.0:
            # already exact; a solve would only add rounding noise
            history.append(rmse)
            return IcpResult(xf, rmse, it - 1, True, history)
        try:
            step = kabsch(moved, paired)
        except RegistrationError as exc:
            return IcpResult(xf, rmse, it - 1, False, history, str(exc))
        xf = compose(step, xf)
        moved, paired, new_rmse = match(xf)
        if abs(rmse - new_rmse) < cfg.convergence_tol:
            history.append(new_rmse)
            return IcpResult(xf, new_rmse, it, True, history)
        rmse = new_rmse
    history.append(rmse)
    return IcpResult(xf, rmse, cfg.max_iterations, False, history, "iteration limit")


def object_delta(before, predicted, cfg_q: QuantConfig, cfg_icp: IcpConfig | None = None) -> IcpResult:
    """Transform between an observed object and its predicted next state.

    ``before`` is an ``ObjectSegment``; ``predicted`` a ``(VoxelGrid, LocationDescriptor)``.
    ICP is seeded with the shift between the two decoded centroids.  The
    reconstruction is registered onto the observed cloud and the result
    inverted: every reconstructed voxel then pairs with a real surface point,
    so voxels lost to tokenization do not drag the estimate sideways.
    Reconstructed voxels farther than two position bins plus one voxel
    diagonal from the seeded observation are discarded first, since under
    that seed no true surface voxel can be farther away.
    """
    cfg_icp = cfg_icp or IcpConfig()
    grid, desc = predicted
    target = compose_scene([(grid, desc)], cfg_q)
    c_before, _ = dequantize_location(before.descriptor, cfg_q)
    c_after, frac = dequantize_location(desc, cfg_q)
    init = RigidTransform.from_translation(c_after - c_before)
    if not len(target):
        return IcpResult(RigidTransform.identity(), math.inf, 0, False, reason="predicted object is empty")
    voxel = frac * cfg_q.max_edge / grid.resolution
    radius = 2.0 * float(cfg_q.bin_width.max()) + math.sqrt(3.0) * voxel
    dist, _ = cKDTree(apply_transform(before.cloud, init)).query(target, distance_upper_bound=radius)
    target = target[np.isfinite(dist)]
    if len(target) < cfg_icp.min_points:
        reason = "predicted object is far from the observation"
        return IcpResult(RigidTransform.identity(), math.inf, 0, False, reason=reason)
    res = icp_align(target, before.cloud, cfg_icp, invert(init))
    return replace(res, transform=invert(res.transform))
