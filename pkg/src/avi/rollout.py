"""Synthetic tabletop scenes and the closed perception -> prediction -> ICP loop."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from avi.geometry import (
    AABB,
    Pose,
    RigidTransform,
    apply_to_pose,
    apply_transform,
    bounding_box,
    format_cloud,
    invert,
)
from avi.icp import IcpConfig, IcpResult, object_delta
from avi.locquant import QuantConfig, QuantizationError, compose_scene, extend_vocabulary
from avi.predictor import (
    Instruction,
    NoisyPredictor,
    OraclePredictor,
    SequenceError,
    TokenContext,
    build_sequence,
    decode_objects,
    step_seed,
)
from avi.segmentation import CameraIntrinsics, DepthImage, MaskSet, SegmentationError, lift_masks
from avi.shapes import default_codebook, random_object

TRACE_SCHEMA = "avi-trace/1"
FAILURES = ("timeout", "icp_failure", "out_of_workspace")


@dataclass(frozen=True)
class CameraConfig:
    width: int = 512
    height: int = 512
    focal: float = 700.0
    position: tuple[float, float, float] = (0.5, 0.5, 2.0)
    # looking straight down: camera x = world x, camera y = -world y
    orientation_wxyz: tuple[float, float, float, float] = (0.0, 1.0, 0.0, 0.0)

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(
            self.focal, self.focal, (self.width - 1) / 2, (self.height - 1) / 2, self.width, self.height
        )

    def pose(self) -> Pose:
        return Pose(np.array(self.position), np.array(self.orientation_wxyz))


@dataclass(frozen=True)
class SceneConfig:
    n_objects: int = 2
    size_range: tuple[float, float] = (0.08, 0.16)
    points_range: tuple[int, int] = (200, 2000)
    table_height: float = 0.05
    gap: float = 0.02
    camera: CameraConfig = field(default_factory=CameraConfig)
    workspace: AABB = field(default_factory=AABB.unit)


@dataclass(frozen=True)
class TaskConfig:
    target_object: int = 1
    instruction: str = "move the object to the goal"
    goal_distance: tuple[float, float] = (0.04, 0.08)
    goal_radius: float = 0.01
    max_steps: int = 10
    success_epsilon: float = 0.01
    step_bins: float = 5.0
    max_rmse: float = 0.01
    max_icp_failures: int = 3


@dataclass(frozen=True)
class PredictorSpec:
    """Per-step predictor recipe: the goal-seeking oracle, optionally corrupted."""

    flip_probability: float = 0.0
    seed: int = 0

    @classmethod
    def from_json(cls, obj: dict) -> PredictorSpec:
        if obj.get("kind") == "oracle":
            return cls()
        if obj.get("kind") == "noisy" and obj.get("inner", {}).get("kind") == "oracle":
            return cls(float(obj["flip_probability"]), int(obj.get("seed", 0)))
        raise ValueError("rollouts support the oracle predictor, optionally wrapped by noisy")


@dataclass(frozen=True)
class RolloutConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    quant: QuantConfig = field(default_factory=QuantConfig)
    # noisy predictions rarely settle to 1e-8 m; a looser stop keeps trials cheap
    icp: IcpConfig = field(default_factory=lambda: IcpConfig(max_iterations=30, convergence_tol=1e-6))
    base_vocab: int = 1000
    codebook_size: int = 512
    codebook_seed: int = 0

    def context(self) -> TokenContext:
        cb = default_codebook(self.codebook_size, self.codebook_seed)
        return TokenContext(extend_vocabulary(self.base_vocab, cb.k), cb, self.quant)


@dataclass
class SceneObject:
    id: int
    cloud: np.ndarray
    attached: bool = False


@dataclass
class Scene:
    objects: list[SceneObject]
    gripper: Pose
    workspace: AABB
    step_index: int = 0

    def object(self, oid: int) -> SceneObject:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(oid)


@dataclass(frozen=True)
class Task:
    instruction: Instruction
    target_object: int
    goal_center: np.ndarray
    goal_radius: float
    max_steps: int
    success_epsilon: float


@dataclass
class StepRecord:
    step: int
    icp: IcpResult | None
    gripper: Pose
    target_centroid: np.ndarray
    failure: str = ""
    detail: str = ""
    tokens: object = None
    predicted_cloud: np.ndarray | None = None
    target_cloud: np.ndarray | None = None


@dataclass
class RolloutTrace:
    seed: int
    steps: list[StepRecord]
    success: bool
    reason: str = ""
    goal_center: np.ndarray | None = None

    @property
    def outcome(self) -> str:
        return "success" if self.success else f"failure({self.reason})"


def render(scene: Scene, camera: CameraConfig) -> tuple[DepthImage, MaskSet]:
    """Z-buffer point splatting: each point lands in its nearest pixel, nearest depth wins."""
    intr = camera.intrinsics()
    to_cam = invert(camera.pose().as_transform())
    pts, labels = [], []
    for obj in scene.objects:
        pts.append(apply_transform(obj.cloud, to_cam))
        labels.append(np.full(len(obj.cloud), obj.id, dtype=np.int64))
    cam = np.concatenate(pts)
    lab = np.concatenate(labels)
    front = cam[:, 2] > 1e-6
    cam, lab = cam[front], lab[front]
    u = np.rint(intr.fx * cam[:, 0] / cam[:, 2] + intr.cx).astype(np.int64)
    v = np.rint(intr.fy * cam[:, 1] / cam[:, 2] + intr.cy).astype(np.int64)
    ok = (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    u, v, z, lab = u[ok], v[ok], cam[ok, 2], lab[ok]
    # farthest first so nearer points overwrite; ties resolved by point order
    order = np.lexsort((np.arange(len(z)), -z))
    depth = np.zeros((intr.height, intr.width))
    masks = np.zeros((intr.height, intr.width), dtype=np.int64)
    depth[v[order], u[order]] = z[order]
    masks[v[order], u[order]] = lab[order]
    return DepthImage(depth), MaskSet(masks)


def generate_scene(cfg: SceneConfig, seed: int):
    """Random non-overlapping primitives resting on a table, plus their rendering.

    Returns ``(scene, masks, depth, intrinsics)``.
    """
    if not 1 <= cfg.n_objects <= 16:
        raise ValueError("object count must be in [1, 16]")
    rng = np.random.default_rng(seed)
    ws = cfg.workspace
    objects: list[SceneObject] = []
    boxes: list[AABB] = []
    for oid in range(1, cfg.n_objects + 1):
        _, pts = random_object(rng, cfg.size_range, cfg.points_range)
        pts = pts - pts.min(axis=0) * [0, 0, 1]
        pts[:, 2] += cfg.table_height
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        for _ in range(1000):
            offset = rng.uniform(ws.min[:2] - lo[:2] + 0.05, ws.max[:2] - hi[:2] - 0.05)
            box = AABB(np.r_[lo[:2] + offset, lo[2]], np.r_[hi[:2] + offset, hi[2]])
            grown = AABB(box.min - cfg.gap, box.max + cfg.gap)
            if not any(grown.overlaps(b) for b in boxes):
                break
        else:
            raise RuntimeError(f"could not place object {oid} after 1000 attempts")
        boxes.append(box)
        objects.append(SceneObject(oid, pts + np.r_[offset, 0.0]))
    target = objects[0].cloud.mean(axis=0)
    objects[0].attached = True
    scene = Scene(objects, Pose(target), ws)
    depth, masks = render(scene, cfg.camera)
    return scene, masks, depth, cfg.camera.intrinsics()


def make_task(scene: Scene, cfg: TaskConfig, rng: np.random.Generator) -> Task:
    """Goal displaced horizontally from the target so the object stays in the workspace."""
    obj = scene.object(cfg.target_object)
    c = obj.cloud.mean(axis=0)
    lo, hi = obj.cloud.min(axis=0), obj.cloud.max(axis=0)
    for _ in range(1000):
        ang = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(*cfg.goal_distance)
        shift = np.array([np.cos(ang), np.sin(ang), 0.0]) * dist
        if np.all(lo + shift >= scene.workspace.min + 0.02) and np.all(hi + shift <= scene.workspace.max - 0.02):
            break
    else:
        raise RuntimeError("no reachable goal for the target object")
    instr = Instruction.from_text(0, cfg.instruction)
    return Task(instr, cfg.target_object, c + shift, cfg.goal_radius, cfg.max_steps, cfg.success_epsilon)


def goal_delta(scene: Scene, task: Task, quant: QuantConfig, step_bins: float) -> RigidTransform:
    """Translation toward the goal, capped at ``step_bins`` position bins."""
    c = scene.object(task.target_object).cloud.mean(axis=0)
    d = task.goal_center - c
    cap = step_bins * float(quant.bin_width.min())
    n = np.linalg.norm(d)
    if n > cap:
        d = d * (cap / n)
    return RigidTransform.from_translation(d)


def step(scene: Scene, task: Task, spec: PredictorSpec, cfg: RolloutConfig, ctx: TokenContext, seed: int = 0,
         record: bool = False) -> tuple[Scene, StepRecord]:  # fmt: skip
    """One perception -> prediction -> registration -> actuation cycle.

    Failures are returned in the record; the scene is left unchanged.
    """
    target = scene.object(task.target_object)
    rec = StepRecord(scene.step_index, None, scene.gripper, target.cloud.mean(axis=0))
    depth, masks = render(scene, cfg.scene.camera)
    cam = cfg.scene.camera
    try:
        decomp = lift_masks(depth, cam.intrinsics(), cam.pose(), masks, scene.workspace, cfg.quant)
    except SegmentationError as exc:
        rec.failure, rec.detail = "icp_failure", str(exc)
        return scene, rec
    before = decomp.segment(task.target_object)
    if before is None:
        rec.failure, rec.detail = "icp_failure", "target not visible"
        return scene, rec

    oracle = OraclePredictor(goal_delta(scene, task, cfg.quant, cfg.task.step_bins), task.target_object, ctx)
    predictor = oracle
    if spec.flip_probability > 0:
        predictor = NoisyPredictor(oracle, spec.flip_probability, step_seed(spec.seed, seed, scene.step_index), ctx)
    try:
        current = build_sequence(decomp, task.instruction, ctx)
        predicted = predictor.predict(current)
        decoded = decode_objects(predicted, ctx)
    except QuantizationError as exc:
        rec.failure, rec.detail = "out_of_workspace", str(exc)
        return scene, rec
    except SequenceError as exc:
        rec.failure, rec.detail = "icp_failure", str(exc)
        return scene, rec
    if record:
        rec.tokens = predicted
        rec.predicted_cloud = compose_scene([decoded[task.target_object]], cfg.quant)

    result = object_delta(before, decoded[task.target_object], cfg.quant, cfg.icp)
    rec.icp = result
    if not result.converged and not math.isfinite(result.rmse):
        rec.failure, rec.detail = "icp_failure", result.reason
        return scene, rec
    if result.rmse > cfg.task.max_rmse:
        rec.failure, rec.detail = "icp_failure", f"rmse {result.rmse:.4g} above {cfg.task.max_rmse}"
        return scene, rec

    moved = apply_transform(target.cloud, result.transform)
    objects = [replace(o, cloud=moved) if o.id == target.id else o for o in scene.objects]
    new_scene = Scene(objects, apply_to_pose(result.transform, scene.gripper), scene.workspace, scene.step_index + 1)
    rec.gripper = new_scene.gripper
    rec.target_centroid = moved.mean(axis=0)
    if record:
        rec.target_cloud = moved
    if not scene.workspace.contains(bounding_box(moved).min[None])[0] or not scene.workspace.contains(
        bounding_box(moved).max[None]
    )[0]:
        rec.failure, rec.detail = "out_of_workspace", "target left the workspace"
    return new_scene, rec


def run_rollout(cfg: RolloutConfig, spec: PredictorSpec, seed: int, record: bool = False,
                ctx: TokenContext | None = None) -> RolloutTrace:  # fmt: skip
    ctx = ctx or cfg.context()
    scene, *_ = generate_scene(cfg.scene, seed)
    task = make_task(scene, replace(cfg.task), np.random.default_rng([seed, 1]))
    steps: list[StepRecord] = []
    failures = 0

    def reached(s: Scene) -> bool:
        c = s.object(task.target_object).cloud.mean(axis=0)
        return float(np.linalg.norm(c - task.goal_center)) <= task.success_epsilon

    for k in range(task.max_steps):
        if reached(scene):
            return RolloutTrace(seed, steps, True, goal_center=task.goal_center)
        scene_index = scene.step_index
        scene, rec = step(scene, task, spec, cfg, ctx, seed, record)
        rec.step = k
        steps.append(rec)
        if rec.failure == "out_of_workspace":
            return RolloutTrace(seed, steps, False, "out_of_workspace", task.goal_center)
        if rec.failure:
            failures += 1
            # a failed step leaves the scene as is; bump the counter so noise is redrawn
            scene.step_index = scene_index + 1
            if failures >= cfg.task.max_icp_failures:
                return RolloutTrace(seed, steps, False, "icp_failure", task.goal_center)
    if reached(scene):
        return RolloutTrace(seed, steps, True, goal_center=task.goal_center)
    return RolloutTrace(seed, steps, False, "timeout", task.goal_center)


@dataclass(frozen=True)
class RolloutSummary:
    successes: int
    trials: int

    def __post_init__(self):
        if self.trials < 1 or not 0 <= self.successes <= self.trials:
            raise ValueError("need 0 <= successes <= trials and trials >= 1")

    @property
    def mean(self) -> float:
        return self.successes / self.trials

    @property
    def stderr(self) -> float:
        p = self.mean
        return math.sqrt(p * (1 - p) / self.trials)

    def __str__(self) -> str:
        return f"{self.mean:.2f} ± {self.stderr:.2f}"

    def to_json(self) -> dict:
        return {
            "successes": self.successes,
            "trials": self.trials,
            "mean": self.mean,
            "stderr": self.stderr,
            "formatted": str(self),
        }


def summarize(outcomes) -> RolloutSummary:
    outcomes = [bool(o) for o in outcomes]
    if not outcomes:
        raise ValueError("no outcomes to summarize")
    return RolloutSummary(sum(outcomes), len(outcomes))


def run_trials(cfg: RolloutConfig, spec: PredictorSpec, seeds) -> list[RolloutTrace]:
    ctx = cfg.context()
    return [run_rollout(cfg, spec, s, ctx=ctx) for s in seeds]


# -- trace output -----------------------------------------------------------------


def _pose_json(p: Pose) -> dict:
    return {"position": p.position.tolist(), "orientation_wxyz": p.orientation.tolist()}


def write_trace(trace: RolloutTrace, out_dir, writer=None) -> dict:
    """Per-step point clouds, token streams and ICP results plus ``manifest.json``.

    ``writer(path, text)`` does the actual writing (defaults to plain writes).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    writer = writer or (lambda p, text: Path(p).write_text(text))
    steps = []
    for rec in trace.steps:
        stem = f"step_{rec.step:03d}"
        entry = {
            "step": rec.step,
            "target_centroid": rec.target_centroid.tolist(),
            "gripper": _pose_json(rec.gripper),
            "failure": rec.failure or None,
            "detail": rec.detail or None,
        }
        if rec.icp is not None:
            writer(out / f"{stem}_icp.json", json.dumps(rec.icp.to_json(), indent=2) + "\n")
            entry["icp"] = f"{stem}_icp.json"
        if rec.tokens is not None:
            writer(out / f"{stem}_tokens.txt", rec.tokens.to_stream())
            entry["tokens"] = f"{stem}_tokens.txt"
        if rec.predicted_cloud is not None:
            writer(out / f"{stem}_predicted.xyz", format_cloud(rec.predicted_cloud, "decoded prediction"))
            entry["predicted_cloud"] = f"{stem}_predicted.xyz"
        if rec.target_cloud is not None:
            writer(out / f"{stem}_target.xyz", format_cloud(rec.target_cloud, "target after step"))
            entry["target_cloud"] = f"{stem}_target.xyz"
        steps.append(entry)
    manifest = {
        "schema": TRACE_SCHEMA,
        "seed": trace.seed,
        "outcome": "success" if trace.success else "failure",
        "reason": trace.reason or None,
        "goal_center": None if trace.goal_center is None else trace.goal_center.tolist(),
        "steps": steps,
    }
    writer(out / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    return manifest


def rollout_config_from_json(obj: dict) -> RolloutConfig:
    scene = obj.get("scene", {})
    cam = CameraConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in scene.get("camera", {}).items()})
    ws = AABB.from_json(scene["workspace"]) if "workspace" in scene else AABB.unit()
    scene_cfg = SceneConfig(
        **{k: tuple(v) if isinstance(v, list) else v for k, v in scene.items() if k not in ("camera", "workspace")},
        camera=cam,
        workspace=ws,
    )
    task = TaskConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in obj.get("task", {}).items()})
    quant = QuantConfig.from_json(obj["quant"]) if "quant" in obj else QuantConfig(workspace=ws)
    icp = IcpConfig.from_json(obj["icp"]) if "icp" in obj else RolloutConfig().icp
    extra = {k: obj[k] for k in ("base_vocab", "codebook_size", "codebook_seed") if k in obj}
    return RolloutConfig(scene_cfg, task, quant, icp, **extra)
