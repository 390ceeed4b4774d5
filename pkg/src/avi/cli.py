"""``avi`` command line: every pipeline stage plus the rollout harness.

Exit status: 0 on success, 1 on usage errors, 2 when a pipeline stage fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from avi import geometry, icp, locquant, predictor, rollout, segmentation, vqtok
from avi.shapes import default_codebook

log = logging.getLogger("avi")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def atomic_write(path, data: str | bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _emit(args, text: str) -> None:
    if getattr(args, "out", None):
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"no such file: {path}") from exc


def _box(text: str | None) -> geometry.AABB:
    if not text:
        return geometry.AABB.unit()
    vals = [float(v) for v in text.split(",")]
    if len(vals) != 6:
        raise UsageError("--box takes six comma-separated numbers: xmin,ymin,zmin,xmax,ymax,zmax")
    return geometry.AABB(np.array(vals[:3]), np.array(vals[3:]))


def _quant(args) -> locquant.QuantConfig:
    return locquant.load_quant_config(args.quant) if getattr(args, "quant", None) else locquant.QuantConfig()


def _codebook(args) -> vqtok.Codebook:
    if getattr(args, "codebook", None):
        return vqtok.load_codebook(args.codebook)
    return default_codebook(512, 0)


def _context(args) -> predictor.TokenContext:
    cb = _codebook(args)
    return predictor.TokenContext(locquant.extend_vocabulary(args.base_vocab, cb.k), cb, _quant(args))


def _seed(value: str) -> int:
    s = int(value)
    if not 0 <= s < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return s


# -- subcommands ------------------------------------------------------------------


def cmd_voxelize(args):
    grid = geometry.voxelize(geometry.read_cloud(args.cloud), _box(args.box), args.res)
    atomic_write(args.out, geometry.grid_to_bytes(grid))
    log.info("%d occupied voxels", grid.count)


def cmd_devoxelize(args):
    grid = geometry.grid_from_bytes(Path(args.grid).read_bytes())
    _emit(args, geometry.format_cloud(geometry.devoxelize(grid, _box(args.box))))


def cmd_lift(args):
    depth = segmentation.depth_from_bytes(Path(args.depth).read_bytes())
    masks = segmentation.masks_from_bytes(Path(args.masks).read_bytes())
    intr, pose = segmentation.load_camera(args.camera)
    cfg = _quant(args)
    decomp = segmentation.lift_masks(depth, intr, pose, masks, cfg.workspace, cfg)
    out = Path(args.out_dir)
    summary = {"segments": [], "dropped": decomp.dropped, "outside_workspace": decomp.outside_workspace}
    for seg in decomp.segments:
        name = f"object_{seg.id:03d}.xyz"
        atomic_write(out / name, geometry.format_cloud(seg.cloud))
        summary["segments"].append(
            {"id": seg.id, "points": len(seg.cloud), "descriptor": list(seg.descriptor.as_tuple()), "cloud": name}
        )
    atomic_write(out / "segments.json", _json(summary))


def cmd_locquant(args):
    cfg = _quant(args)
    if args.action == "table1":
        for name, r in locquant.table1_rows():
            print(f"{name}\t{r}")
        return
    vocab = locquant.extend_vocabulary(args.base_vocab, args.codebook_size)
    if args.action == "encode":
        if not args.input:
            raise UsageError("locquant encode needs a point-cloud file")
        desc = locquant.quantize_location(geometry.read_cloud(args.input), cfg)
        _emit(args, locquant.format_tokens(locquant.tokens_of(desc, vocab), [f"bins {desc.as_tuple()}"]))
    else:
        if not args.input:
            raise UsageError("locquant decode needs a token file")
        desc = locquant.descriptor_of(locquant.read_tokens(args.input), vocab)
        centroid, frac = locquant.dequantize_location(desc, cfg)
        _emit(args, _json({"bins": list(desc.as_tuple()), "centroid": centroid.tolist(), "scale_fraction": frac}))


def cmd_codebook(args):
    grids = [geometry.grid_from_bytes(Path(p).read_bytes()) for p in args.grids]
    cb = vqtok.train_codebook(grids, k=args.k, seed=args.seed)
    atomic_write(args.out, json.dumps(cb.to_json()))
    for w in cb.warnings:
        log.warning(w)


def cmd_shape(args):
    cb = _codebook(args)
    if args.action == "encode":
        grid = geometry.grid_from_bytes(Path(args.input).read_bytes())
        _emit(args, locquant.format_tokens(vqtok.encode_grid(grid, cb)))
    else:
        grid = vqtok.decode_grid(locquant.read_tokens(args.input), cb)
        if not args.out:
            raise UsageError("shape decode needs --out")
        atomic_write(args.out, geometry.grid_to_bytes(grid))


def cmd_predict(args):
    ctx = _context(args)
    model = predictor.load_predictor(args.predictor, ctx)
    current = predictor.SceneTokens.from_stream(Path(args.input).read_text(), ctx.vocab)
    atomic_write(args.out, predictor.predict_next(model, current).to_stream())


def cmd_icp(args):
    cfg = icp.IcpConfig.from_json(_read_json(args.config)) if args.config else icp.IcpConfig()
    init = geometry.RigidTransform.from_json(_read_json(args.init)) if args.init else None
    result = icp.icp_align(geometry.read_cloud(args.source), geometry.read_cloud(args.target), cfg, init)
    _emit(args, _json(result.to_json()))
    if not result.converged and result.reason != "iteration limit":
        raise RuntimeError(f"icp failed: {result.reason}")


def cmd_rollout(args):
    cfg = rollout.rollout_config_from_json(_read_json(args.task)) if args.task else rollout.RolloutConfig()
    spec = rollout.PredictorSpec.from_json(_read_json(args.predictor)) if args.predictor else rollout.PredictorSpec()
    out = Path(args.out_dir)
    ctx = cfg.context()
    outcomes = []
    for i in range(args.trials):
        seed = predictor.step_seed(args.seed, i)
        trace = rollout.run_rollout(cfg, spec, seed, record=True, ctx=ctx)
        rollout.write_trace(trace, out / f"trial_{i:03d}", atomic_write)
        outcomes.append({"trial": i, "seed": seed, "success": trace.success, "reason": trace.reason or None})
        log.info("trial %d: %s", i, trace.outcome)
    summary = rollout.summarize([o["success"] for o in outcomes])
    atomic_write(out / "outcomes.json", _json({"outcomes": outcomes}))
    atomic_write(out / "summary.json", _json(summary.to_json()))
    print(summary)


def cmd_summarize(args):
    data = _read_json(args.outcomes)
    items = data["outcomes"] if isinstance(data, dict) else data
    flags = [o["success"] if isinstance(o, dict) else bool(o) for o in items]
    print(rollout.summarize(flags))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="avi", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("voxelize", help="point cloud -> binary voxel grid")
    s.add_argument("cloud")
    s.add_argument("--box", help="xmin,ymin,zmin,xmax,ymax,zmax (default unit cube)")
    s.add_argument("--res", type=int, default=64)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_voxelize)

    s = sub.add_parser("devoxelize", help="voxel grid -> cell-center point cloud")
    s.add_argument("grid")
    s.add_argument("--box")
    s.add_argument("--out")
    s.set_defaults(func=cmd_devoxelize)

    s = sub.add_parser("lift", help="depth + masks + camera -> per-object clouds")
    s.add_argument("depth")
    s.add_argument("masks")
    s.add_argument("camera")
    s.add_argument("--quant", help="quantization config JSON (workspace, bins)")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_lift)

    s = sub.add_parser("locquant", help="location tokens and the effective-resolution table")
    s.add_argument("action", choices=["encode", "decode", "table1"])
    s.add_argument("input", nargs="?")
    s.add_argument("--quant")
    s.add_argument("--base-vocab", type=int, default=1000)
    s.add_argument("--codebook-size", type=int, default=512)
    s.add_argument("--out")
    s.set_defaults(func=cmd_locquant)

    s = sub.add_parser("codebook", help="train a shape codebook")
    s.add_argument("action", choices=["train"])
    s.add_argument("grids", nargs="+")
    s.add_argument("--k", type=int, default=512)
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_codebook)

    s = sub.add_parser("shape", help="voxel grid <-> 8192 shape tokens")
    s.add_argument("action", choices=["encode", "decode"])
    s.add_argument("input")
    s.add_argument("--codebook", help="codebook JSON (default: built-in primitive codebook)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_shape)

    s = sub.add_parser("predict", help="next-state token prediction")
    s.add_argument("--predictor", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--codebook")
    s.add_argument("--quant")
    s.add_argument("--base-vocab", type=int, default=1000)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("icp", help="rigid registration of two point clouds")
    s.add_argument("source")
    s.add_argument("target")
    s.add_argument("--init", help="initial transform JSON {rotation, translation}")
    s.add_argument("--config", help="ICP config JSON")
    s.add_argument("--out")
    s.set_defaults(func=cmd_icp)

    s = sub.add_parser("rollout", help="closed-loop rollouts and success statistics")
    s.add_argument("--task", help="scene/task config JSON")
    s.add_argument("--predictor", help="predictor JSON (oracle, or noisy wrapping oracle)")
    s.add_argument("--trials", type=int, default=20)
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_rollout)

    s = sub.add_parser("summarize", help="format success outcomes as 'M.MM ± S.SS'")
    s.add_argument("outcomes")
    s.set_defaults(func=cmd_summarize)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"avi: {exc}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"avi: {args.command} failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
