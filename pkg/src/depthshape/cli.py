"""Command-line entry point: ``depthshape <subcommand> [flags]``.

Exit codes: 0 success, 1 when any item (image, scene) fails, 2 on usage errors.
Log verbosity comes from the ``DEPTHSHAPE_LOG_LEVEL`` environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .config import RunConfig
from .errors import DepthShapeError, DomainError
from .geometry import PointCloud, estimate_normals, unproject
from .io import DEPTH_FORMATS, atomic_write, guess_format, read_depth, write_depth, write_ply
from .losses import (
    NORMALIZERS,
    ilnr_loss,
    ilnr_normalize,
    msg_loss,
    overall_loss,
    pwn_loss,
    ranking_loss,
    align_scale_shift,
)
from .metrics import ALL_METRICS, evaluate
from .recovery import Perturbation, correct, perturb, recover, recovery_benchmark, sample_perturbation, summary_json
from .report import ReportRow, emit_report
from .sampling import sample_global_pairs, sample_training_pairs, segment_planes
from .scenes import SCENE_KINDS, SceneSpec, synth_scene

logger = logging.getLogger("depthshape")

LOG_ENV = "DEPTHSHAPE_LOG_LEVEL"


class _UsageError(Exception):
    pass


def _metric_list(text: str) -> list[str]:
    names = [t.strip() for t in text.split(",") if t.strip()]
    unknown = sorted(set(names) - set(ALL_METRICS))
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown metrics {unknown}; choose from {','.join(ALL_METRICS)}")
    return names


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="depthshape", description="Depth-map geometry toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration; flags override its values")
    common.add_argument("--out", help="output directory (created if missing)")
    common.add_argument("--seed", type=int, help="random seed (default 0)")

    depth_in = argparse.ArgumentParser(add_help=False)
    depth_in.add_argument("--format", choices=DEPTH_FORMATS, help="depth file format (default: from suffix)")
    depth_in.add_argument("--divisor", type=float, help="u16 depth divisor (default 1000)")

    camera = argparse.ArgumentParser(add_help=False)
    camera.add_argument("--fov", type=float, help="horizontal field of view in degrees (default 60)")
    camera.add_argument("--fx", type=float, help="focal length in pixels (overrides --fov)")
    camera.add_argument("--u0", type=float, help="principal point column (default: image centre)")
    camera.add_argument("--v0", type=float, help="principal point row (default: image centre)")

    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("unproject", parents=[common, depth_in, camera], help="depth map to PLY point cloud")
    p.add_argument("--input", required=True)
    p.add_argument("--binary-ply", action="store_true")
    p.add_argument("--normals", action="store_true", help="estimate normals; pixels without one are dropped")

    p = sub.add_parser("recover", parents=[common, depth_in, camera], help="estimate depth shift and focal scale")
    p.add_argument("--input", required=True)
    p.add_argument("--binary-ply", action="store_true")

    p = sub.add_parser("perturb", parents=[common, depth_in, camera], help="apply a seeded shift/focal perturbation")
    p.add_argument("--input", required=True)
    p.add_argument("--delta", type=float, help="explicit depth shift (default: sampled)")
    p.add_argument("--alpha", type=float, help="explicit focal scale (default: sampled)")

    p = sub.add_parser("metrics", parents=[common, depth_in, camera], help="evaluate predictions against ground truth")
    p.add_argument("--input", nargs="+", required=True, help="predicted depth files")
    p.add_argument("--gt", nargs="+", required=True, help="ground-truth depth files, same order")
    p.add_argument("--metrics", type=_metric_list, help=f"comma-separated subset of {','.join(ALL_METRICS)}")
    p.add_argument("--pairs", type=_positive_int, help="point pairs sampled for WHDR (default 5000)")
    p.add_argument("--report-format", choices=("csv", "json"), default="csv")
    p.add_argument("--jobs", type=_positive_int, default=1)
    p.add_argument("--timing", action="store_true", help="record per-image wall time (not deterministic)")

    p = sub.add_parser("losses", parents=[common, depth_in, camera], help="training losses of a prediction")
    p.add_argument("--input", required=True, help="predicted depth file, in normalised ground-truth units")
    p.add_argument("--gt", required=True, help="ground-truth depth file")

    p = sub.add_parser("synth", parents=[common], help="render a synthetic scene with ground truth")
    p.add_argument("--spec", default=None, help=f"scene kind ({', '.join(SCENE_KINDS)}) or YAML spec file")
    p.add_argument("--size", type=_positive_int, help="override width and height")

    p = sub.add_parser("bench", parents=[common], help="recovery benchmark on synthetic scenes")
    p.add_argument("--scenes", type=_positive_int, default=100)
    p.add_argument("--size", type=_positive_int, default=128)
    p.add_argument("--jobs", type=_positive_int, default=1)
    return parser


def _load_config(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.from_yaml(Path(args.config).read_text())
    else:
        cfg = RunConfig()
    updates = {}
    for key in ("format", "divisor", "seed", "out"):
        value = getattr(args, key, None)
        if value is not None:
            updates[key] = value
    if getattr(args, "metrics", None):
        updates["metrics"] = args.metrics
    cam = {k: getattr(args, a) for k, a in (("fov", "fov"), ("fx", "fx"), ("u0", "u0"), ("v0", "v0")) if getattr(args, a, None) is not None}
    if cam:
        updates["camera"] = replace(cfg.camera, **cam)
    if getattr(args, "pairs", None):
        updates["sampler"] = replace(cfg.sampler, whdr_pairs=args.pairs)
    return replace(cfg, **updates)


def _out_dir(cfg: RunConfig) -> Path | None:
    if cfg.out is None:
        return None
    path = Path(cfg.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dump(record) -> str:
    return json.dumps(record, indent=2, sort_keys=True) + "\n"


def _write_text(path: Path, text: str) -> None:
    with atomic_write(path, "w") as fh:
        fh.write(text)


def _emit(cfg: RunConfig, name: str, text: str) -> None:
    out = _out_dir(cfg)
    if out is not None:
        _write_text(out / name, text)
    sys.stdout.write(text)


def _read(path: str, cfg: RunConfig):
    return read_depth(path, cfg.format, cfg.divisor)


def cmd_unproject(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    if out is None:
        raise _UsageError("unproject needs --out")
    depth = _read(args.input, cfg)
    cam = cfg.camera.intrinsics(depth.width, depth.height)
    if args.normals:
        nm = estimate_normals(depth, cam)
        cloud = unproject(depth.with_mask(nm.mask), cam)
        u, v = cloud.source_pixel[:, 0], cloud.source_pixel[:, 1]
        cloud = PointCloud(cloud.points, cloud.source_pixel, nm.normals[v, u])
    else:
        cloud = unproject(depth, cam)
    write_ply(cloud, out / "points.ply", binary=args.binary_ply)
    sys.stdout.write(_dump({"points": len(cloud), "normals": cloud.normals is not None, "f": cam.f}))
    return 0


def cmd_recover(args, cfg: RunConfig) -> int:
    raw = _read(args.input, cfg)
    if raw.valid_count == 0:
        raise DomainError("input has no valid pixels")
    # Division only keeps depth positive; the shift is then in units of the maximum depth.
    scale = float(raw.valid_values().max())
    depth = raw.with_values(raw.values / scale)
    cam = cfg.camera.intrinsics(depth.width, depth.height)
    res = recover(depth, cam, cfg.recovery)
    corrected, cam_out = correct(depth, cam, res.estimate)
    record = res.to_record()
    record.update(
        input=str(args.input),
        normalization_scale=scale,
        f_init=cam.f,
        f_corrected=cam_out.f,
        fov_corrected=cam_out.fov(depth.width),
    )
    out = _out_dir(cfg)
    if out is not None:
        write_ply(unproject(corrected, cam_out), out / "corrected.ply", binary=args.binary_ply)
    _emit(cfg, "recovery.json", _dump(record))
    return 0


def cmd_perturb(args, cfg: RunConfig) -> int:
    depth = _read(args.input, cfg)
    cam = cfg.camera.intrinsics(depth.width, depth.height)
    rng = np.random.default_rng(cfg.seed)
    if args.delta is None or args.alpha is None:
        sampled = sample_perturbation(rng, depth)
    else:
        sampled = Perturbation()
    p = Perturbation(
        sampled.delta_d if args.delta is None else args.delta,
        sampled.alpha_f if args.alpha is None else args.alpha,
    )
    shifted, cam_p = perturb(depth, cam, p)
    record = {"delta_d": p.delta_d, "alpha_f": p.alpha_f, "f_in": cam.f, "f_out": cam_p.f, "seed": cfg.seed}
    out = _out_dir(cfg)
    if out is not None:
        fmt = cfg.format or guess_format(args.input)
        write_depth(shifted, out / f"perturbed{Path(args.input).suffix or '.txt'}", fmt, cfg.divisor)
    _emit(cfg, "perturbation.json", _dump(record))
    return 0


def _metrics_row(index: int, pred_path: str, gt_path: str, cfg: RunConfig, timing: bool) -> ReportRow:
    image_id = Path(pred_path).stem
    start = time.perf_counter()
    try:
        pred, gt = _read(pred_path, cfg), _read(gt_path, cfg)
        if pred.shape != gt.shape:
            raise DomainError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
        cam = cfg.camera.intrinsics(gt.width, gt.height)
        pairs = planes = None
        if "whdr" in cfg.metrics:
            # Per-image seed so rows do not depend on processing order.
            seed = np.random.SeedSequence([cfg.seed, index])
            pairs = sample_global_pairs(pred.mask & gt.mask, cfg.sampler.whdr_pairs, seed)
        if "pe" in cfg.metrics:
            seg = segment_planes(estimate_normals(gt, cam), min_region=cfg.recovery.min_region)
            planes = seg.masks()
        report = evaluate(pred, gt, cfg.metrics, pairs=pairs, cam=cam, plane_masks=planes)
        row = ReportRow.from_metrics(image_id, report)
    except (DepthShapeError, OSError) as exc:
        logger.warning("%s: %s", pred_path, exc)
        row = ReportRow.failure(image_id, exc)
    if timing:
        row.timing_s = time.perf_counter() - start
    return row


def cmd_metrics(args, cfg: RunConfig) -> int:
    if len(args.input) != len(args.gt):
        raise _UsageError(f"--input has {len(args.input)} files but --gt has {len(args.gt)}")
    jobs = [(i, p, g, cfg, args.timing) for i, (p, g) in enumerate(zip(args.input, args.gt))]
    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(lambda a: _metrics_row(*a), jobs))
    else:
        rows = [_metrics_row(*a) for a in jobs]
    _emit(cfg, f"report.{args.report_format}", emit_report(rows, args.report_format))
    return 0 if all(not r.status.startswith("error") for r in rows) else 1


def cmd_losses(args, cfg: RunConfig) -> int:
    pred, gt = _read(args.input, cfg), _read(args.gt, cfg)
    if pred.shape != gt.shape:
        raise DomainError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    cam = cfg.camera.intrinsics(gt.width, gt.height)
    s = cfg.sampler
    pairs = sample_training_pairs(
        gt, cam, cfg.seed, edge_count=s.edge_count, per_plane=s.per_plane, global_count=s.global_count
    )
    aligned = align_scale_shift(pred, gt).apply(pred)
    pred_n = estimate_normals(aligned.with_mask(aligned.mask & gt.mask), cam)
    gt_n = estimate_normals(gt, cam)
    # The normal term needs valid normals at both ends of every pair.
    pairs = pairs.within(pred.mask & gt.mask & pred_n.mask & gt_n.mask)
    ranked = pairs.select("global")
    record = {
        "pairs": len(pairs),
        "ilnr": {name: ilnr_loss(pred, gt, name) for name in NORMALIZERS},
        "msg": msg_loss(pred, ilnr_normalize(gt)),
        "pwn": pwn_loss(pred_n, gt_n, pairs) if len(pairs) else None,
        "ranking": ranking_loss(pred, gt, ranked) if len(ranked) else None,
        "overall": overall_loss(pred, gt, pairs, cfg.loss_weights, cam) if len(pairs) else None,
        "weights": {"lambda_a": cfg.loss_weights.lambda_a, "lambda_g": cfg.loss_weights.lambda_g,
                    "lambda_pwn": cfg.loss_weights.lambda_pwn},
        "seed": cfg.seed,
    }
    _emit(cfg, "losses.json", _dump(record))
    return 0


def _scene_spec(args, cfg: RunConfig) -> SceneSpec:
    spec = cfg.scene or SceneSpec()
    if args.spec is not None:
        if args.spec in SCENE_KINDS:
            spec = replace(spec, kind=args.spec)
        else:
            path = Path(args.spec)
            if not path.exists():
                raise _UsageError(f"--spec must be one of {SCENE_KINDS} or a YAML file; got {args.spec!r}")
            data = yaml.safe_load(path.read_text()) or {}
            if not isinstance(data, dict):
                raise DomainError("scene spec document must be a mapping")
            spec = SceneSpec.from_dict(data)
    if args.size:
        spec = replace(spec, width=args.size, height=args.size)
    return spec


def cmd_synth(args, cfg: RunConfig) -> int:
    spec = _scene_spec(args, cfg)
    scene = synth_scene(spec, cfg.seed)
    record = {
        "spec": spec.to_dict(),
        "seed": cfg.seed,
        "camera": {"u0": scene.cam.u0, "v0": scene.cam.v0, "f": scene.cam.f},
        "plane_count": scene.planes.plane_count,
        "plane_normals": scene.planes.plane_normals.tolist(),
        "valid_pixels": scene.depth.valid_count,
    }
    out = _out_dir(cfg)
    if out is not None:
        write_depth(scene.depth, out / "depth.pfm", "f32")
        labels = "\n".join(" ".join(str(int(x)) for x in row) for row in scene.planes.labels) + "\n"
        _write_text(out / "labels.txt", labels)
    _emit(cfg, "scene.json", _dump(record))
    return 0


def cmd_bench(args, cfg: RunConfig) -> int:
    summary = recovery_benchmark(args.scenes, cfg.seed, size=args.size, config=cfg.recovery, jobs=args.jobs)
    _emit(cfg, "summary.json", summary_json(summary) + "\n")
    return 0 if summary["n_failed"] == 0 else 1


COMMANDS = {
    "unproject": cmd_unproject,
    "recover": cmd_recover,
    "perturb": cmd_perturb,
    "metrics": cmd_metrics,
    "losses": cmd_losses,
    "synth": cmd_synth,
    "bench": cmd_bench,
}


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _load_config(args)
        return COMMANDS[args.command](args, cfg)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"depthshape: error: {exc}", file=sys.stderr)
        return 2
    except (DepthShapeError, OSError) as exc:
        print(f"depthshape: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
