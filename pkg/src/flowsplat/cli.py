"""Command-line surface: reconstruct, render, evaluate, synth."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .errors import FlowSplatError
from .formats import read_poses, write_poses
from .pipeline import (
    evaluate_nvs,
    evaluate_trajectory,
    load_dataset,
    reconstruct,
)
from .scene import GaussianCloud

logger = logging.getLogger("flowsplat")

METRICS_SCHEMA_VERSION = 1


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=str, default=None, help="YAML/JSON config file")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool" or isinstance(f.default, bool):
            parser.add_argument(
                flag, type=_parse_bool, default=None, metavar="BOOL",
                help=f"override config key {f.name} (default {f.default})",
            )
        else:
            parser.add_argument(
                flag, type=type(f.default), default=None,
                help=f"override config key {f.name} (default {f.default})",
            )


def _parse_bool(text):
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {}
    for f in dataclasses.fields(RunConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            overrides[f.name] = val
    if getattr(args, "threads", None) is None and overrides.get("threads") is None:
        overrides["threads"] = cfg.threads or (os.cpu_count() or 1)
    return cfg.apply_overrides(overrides)


def _write_metadata(out_dir: Path, cfg: RunConfig, extra=None):
    meta = {
        "schema_version": METRICS_SCHEMA_VERSION,
        "version": __version__,
        "config": cfg.to_dict(),
    }
    if extra:
        meta.update(extra)
    (out_dir / "run_metadata.json").write_text(json.dumps(meta, indent=2) + "\n")


def _fail(out_dir: Path | None, exc: Exception) -> int:
    record = {
        "error": type(exc).__name__,
        "message": str(exc),
    }
    frame = getattr(exc, "frame_index", None)
    if frame is not None:
        record["frame"] = frame
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "error.json").write_text(json.dumps(record, indent=2) + "\n")
    print(f"error: {record['error']}: {record['message']}", file=sys.stderr)
    return 1


def cmd_reconstruct(args) -> int:
    out_dir = Path(args.out_dir)
    try:
        cfg = _resolve_config(args)
        records, k, gt_poses = load_dataset(args.input_dir, cfg)
        result = reconstruct(records, k, cfg)

        out_dir.mkdir(parents=True, exist_ok=True)
        result.cloud.save(out_dir / "scene.fsgs")
        write_poses(out_dir / "trajectory.txt", result.poses)

        metrics = {
            "schema_version": METRICS_SCHEMA_VERSION,
            "n_gaussians": result.cloud.num,
            "train_frames": [i for i, _ in result.trajectory],
        }
        if gt_poses is not None:
            gt_train = [gt_poses[i] for i, _ in result.trajectory]
            traj = evaluate_trajectory(result.poses, gt_train)
            metrics["trajectory"] = {
                "ate_mm": traj.ate,
                "rpe_t_mm": traj.rpe_t,
                "rpe_r_deg": traj.rpe_r,
            }
        test_frames = [r for r in records if r.role == "test"]
        nvs = None
        if test_frames:
            nvs = evaluate_nvs(result.cloud, test_frames, records, k, cfg)
            metrics["nvs"] = {
                "psnr_mean": nvs["psnr_mean"],
                "ssim_mean": nvs["ssim_mean"],
                "per_frame": [
                    {"index": f["index"], "psnr": f["psnr"], "ssim": f["ssim"]}
                    for f in nvs["per_frame"]
                ],
            }
        (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
        _write_metadata(out_dir, cfg, {"command": "reconstruct"})

        from .report import save_report

        save_report(out_dir, result=result, nvs=nvs, gt_poses=gt_poses)
        logger.info("reconstruction written to %s", out_dir)
        return 0
    except (FlowSplatError, FileNotFoundError, ValueError, OSError) as exc:
        return _fail(out_dir, exc)


def cmd_render(args) -> int:
    out_dir = Path(args.out_dir)
    try:
        cfg = _resolve_config(args)
        cloud = GaussianCloud.load(args.scene)
        from .formats import read_intrinsics
        from .rasterizer import render

        k = read_intrinsics(args.intrinsics)
        poses = read_poses(args.poses)
        out_dir.mkdir(parents=True, exist_ok=True)
        settings = cfg.raster_settings()
        for i, pose in enumerate(poses):
            out = render(cloud, pose, k, settings, threads=max(cfg.threads, 1))
            out.save_color_png(out_dir / f"{i:06d}.png")
            out.save_depth_pfm(out_dir / f"{i:06d}_depth.pfm")
        _write_metadata(out_dir, cfg, {"command": "render", "n_views": len(poses)})
        return 0
    except (FlowSplatError, FileNotFoundError, ValueError, OSError) as exc:
        return _fail(out_dir, exc)


def cmd_evaluate(args) -> int:
    out_dir = Path(args.out_dir)
    try:
        cfg = _resolve_config(args)
        cloud = GaussianCloud.load(args.scene)
        records, k, gt_poses = load_dataset(args.dataset, cfg)

        est_poses = read_poses(args.trajectory) if args.trajectory else None
        train = [r for r in records if r.role == "train"]
        if est_poses is not None:
            if len(est_poses) != len(train):
                raise ValueError(
                    f"trajectory holds {len(est_poses)} poses for {len(train)} train frames"
                )
            for rec, pose in zip(train, est_poses):
                rec.estimated_pose = pose

        metrics = {"schema_version": METRICS_SCHEMA_VERSION, "n_gaussians": cloud.num}
        test_frames = [r for r in records if r.role == "test"]
        frames = test_frames if test_frames else train
        nvs = evaluate_nvs(cloud, frames, records, k, cfg)
        metrics["nvs"] = {
            "psnr_mean": nvs["psnr_mean"],
            "ssim_mean": nvs["ssim_mean"],
            "per_frame": [
                {"index": f["index"], "psnr": f["psnr"], "ssim": f["ssim"]}
                for f in nvs["per_frame"]
            ],
        }
        if gt_poses is not None and est_poses is not None:
            gt_train = [gt_poses[r.index] for r in train]
            traj = evaluate_trajectory(est_poses, gt_train)
            metrics["trajectory"] = {
                "ate_mm": traj.ate,
                "rpe_t_mm": traj.rpe_t,
                "rpe_r_deg": traj.rpe_r,
            }
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
        _write_metadata(out_dir, cfg, {"command": "evaluate"})

        from .report import save_report

        save_report(out_dir, result=None, nvs=nvs, gt_poses=gt_poses)
        return 0
    except (FlowSplatError, FileNotFoundError, ValueError, OSError) as exc:
        return _fail(out_dir, exc)


def cmd_synth(args) -> int:
    out_dir = Path(args.out_dir)
    try:
        cfg = _resolve_config(args)
        from .synthetic import SyntheticSpec, generate_synthetic, write_dataset

        spec = SyntheticSpec(
            n_frames=args.frames,
            n_gaussians=args.gaussians,
            width=args.width,
            height=args.height,
            seed=cfg.seed,
            texture=args.texture,
            depth_scale_range=(args.depth_scale_min, args.depth_scale_max),
            depth_shift_range=(args.depth_shift_min, args.depth_shift_max),
            outlier_fraction=args.outlier_fraction,
        )
        dataset = generate_synthetic(spec, test_every=0)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_dataset(dataset, out_dir)
        _write_metadata(out_dir, cfg, {"command": "synth"})
        return 0
    except (FlowSplatError, FileNotFoundError, ValueError, OSError) as exc:
        return _fail(out_dir, exc)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowsplat",
        description="SfM-free Gaussian-splat reconstruction from monocular sequences",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reconstruct", help="run the full reconstruction")
    p.add_argument("input_dir")
    p.add_argument("out_dir")
    _add_config_flags(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("render", help="render a saved scene at given poses")
    p.add_argument("scene")
    p.add_argument("poses", help="pose list (qw qx qy qz tx ty tz per line)")
    p.add_argument("out_dir")
    p.add_argument("--intrinsics", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("evaluate", help="score a saved scene against a dataset")
    p.add_argument("scene")
    p.add_argument("dataset")
    p.add_argument("out_dir")
    p.add_argument("--trajectory", default=None, help="estimated train poses")
    _add_config_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("out_dir")
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--gaussians", type=int, default=5000)
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--height", type=int, default=120)
    p.add_argument("--texture", choices=["random", "low"], default="random")
    p.add_argument("--depth-scale-min", type=float, default=1.0)
    p.add_argument("--depth-scale-max", type=float, default=1.0)
    p.add_argument("--depth-shift-min", type=float, default=0.0)
    p.add_argument("--depth-shift-max", type=float, default=0.0)
    p.add_argument("--outlier-fraction", type=float, default=0.0)
    _add_config_flags(p)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except Exception as exc:  # last-resort guard so failures stay machine-readable
        traceback.print_exc()
        return _fail(None, exc)


if __name__ == "__main__":
    sys.exit(main())
