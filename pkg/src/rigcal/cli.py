"""Command-line front end: synth, calibrate, eval and sample subcommands.

Exit codes: 0 success (possibly with per-view warnings), 2 bad config,
3 initialization failure, 4 missing init poses in global mode, 5 view-id
mismatch in eval. The environment variable RIGCAL_SEED overrides every
configured seed. Thresholds accept the literal ``inf``.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, evalsynth, pipeline, sampling, warpio
from .geometry import CameraKind
from .robustest import RansacConfig, Thresholds
from .sampling import SamplingConfig, ScoreParams


def _float_or_inf(text: str) -> float:
    if text.strip().lower() in ("inf", "infinity"):
        return math.inf
    return float(text)


def _env_seed(seed: int) -> int:
    env = os.environ.get("RIGCAL_SEED")
    return int(env) if env else seed


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=["incremental", "global"], default="incremental")
    p.add_argument("--camera-model",
                   choices=[k.value for k in CameraKind], default=None,
                   help="camera model for all views (default pinhole_radial)")
    p.add_argument("--cell-size", type=int, default=None, help="coarse sampling cell, pixels")
    p.add_argument("--top-k", type=int, choices=[0, 1, 2, 3], default=None)
    p.add_argument("--probabilistic", action="store_true",
                   help="score-proportional cell selection instead of argmax")
    p.add_argument("--no-brute-force", dest="brute_force", action="store_false",
                   help="pick the initial pair by score instead of trying all three")
    p.add_argument("--f-err", type=_float_or_inf, default=None,
                   help="symmetric epipolar gate in pixels; 'inf' disables")
    p.add_argument("--b-err", type=_float_or_inf, default=None,
                   help="reprojection removal gate in pixels; 'inf' disables")
    p.add_argument("--refine-principal-point", action="store_true")
    p.add_argument("--refine-camera-type", action="store_true",
                   help="escalate fisheye_radial to fisheye_full at the end")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1,
                   help="accepted for compatibility; work is vectorized in-process")
    p.add_argument("--init-poses", type=str, default=None,
                   help="pose file for global mode (overrides the manifest)")


def _config_from_args(args) -> pipeline.PipelineConfig:
    seed = _env_seed(args.seed)
    sampling_cfg = SamplingConfig(
        cell_size=args.cell_size if args.cell_size else 80,
        selection="probabilistic" if args.probabilistic else "argmax",
        seed=seed,
    )
    score = ScoreParams(top_k=args.top_k if args.top_k is not None else 3)
    thresholds = Thresholds(
        f_err=args.f_err if args.f_err is not None else 10.0,
        b_err=args.b_err if args.b_err is not None else 20.0,
    )
    kind = CameraKind(args.camera_model) if args.camera_model else CameraKind.PINHOLE_RADIAL
    return pipeline.PipelineConfig(
        mode=args.mode,
        camera_kind=kind,
        sampling=sampling_cfg,
        score=score,
        thresholds=thresholds,
        ransac_f=RansacConfig.for_fundamental(seed=seed),
        ransac_pose=RansacConfig.for_absolute_pose(seed=seed),
        brute_force=args.brute_force if args.mode == "incremental" else False,
        refine_principal_point=args.refine_principal_point,
        refine_camera_type=args.refine_camera_type,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    try:
        doc = json.loads(Path(args.config).read_text("utf-8"))
        if "camera_kind" in doc:
            doc["camera_kind"] = CameraKind(doc["camera_kind"])
        for key in ("image_size", "warp_size", "distortion"):
            if key in doc:
                doc[key] = tuple(doc[key])
        if "seed" not in doc or os.environ.get("RIGCAL_SEED"):
            doc["seed"] = _env_seed(int(doc.get("seed", 0)))
        cfg = evalsynth.SynthConfig(**doc)
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        manifest_path = evalsynth.generate_scene(cfg, args.out)
    except evalsynth.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    print(f"manifest {manifest_path}")
    print(f"views {cfg.n_views} warp {cfg.warp_size[0]}x{cfg.warp_size[1]} "
          f"camera {cfg.camera_kind.value} noise {cfg.pixel_noise:g} "
          f"outliers {cfg.outlier_fraction:g} seed {cfg.seed}")
    return 0


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------


def cmd_calibrate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.from_report:
        doc = json.loads(Path(args.from_report).read_text("utf-8"))
        config = pipeline.PipelineConfig.from_dict(doc["config"])
        manifest_path = doc["manifest"]
        init_arg = doc.get("init_poses")
    else:
        config = _config_from_args(args)
        manifest_path = args.manifest
        init_arg = args.init_poses

    try:
        manifest = warpio.read_manifest(manifest_path)
    except warpio.ManifestError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2

    init_poses = None
    if config.mode == "global":
        source = init_arg or manifest.init_poses
        if source is None:
            print("missing init poses: global mode needs --init-poses or a manifest entry",
                  file=sys.stderr)
            return 4
        init_poses = warpio.read_pose_file(source)

    t0 = time.perf_counter()
    try:
        if config.mode == "incremental":
            rec = pipeline.run_incremental(manifest, config)
        else:
            rec = pipeline.run_global(manifest, config, init_poses)
    except pipeline.MissingInit as e:
        print(f"missing init poses: {e}", file=sys.stderr)
        return 4
    except pipeline.InitFailed as e:
        print(f"initialization failed: {e}", file=sys.stderr)
        return 3
    wall = time.perf_counter() - t0

    pipeline.write_cameras_file(out / "cameras.txt", rec)
    pipeline.write_poses_file(out / "poses.txt", rec)
    pipeline.write_ply(out / "points.ply", rec, manifest)

    report = {
        "version": __version__,
        "manifest": str(manifest_path),
        "init_poses": init_arg,
        "config": config.to_dict(),
        "views": {v: ("registered" if v in rec.poses else
                      rec.failures.get(v, "unregistered"))
                  for v in rec.view_ids},
        "anchor": rec.anchor,
        "counts": rec.counts,
        "stages": rec.stage_reports,
        "wall_clock_seconds": wall,
    }
    if manifest.gt_poses:
        gt = warpio.read_pose_file(manifest.gt_poses)
        common = {v: rec.poses[v] for v in rec.poses if v in gt}
        if len(common) >= 2:
            errors, skipped = evalsynth.pair_errors(
                common, {v: gt[v] for v in common})
            if errors:
                report["auc"] = {str(tau): evalsynth.auc(errors, tau) for tau in (3.0, 30.0)}
                report["skipped_pairs"] = [list(p) for p in skipped]
    (out / "report.json").write_text(json.dumps(report, indent=1) + "\n", "utf-8")

    for v in rec.view_ids:
        status = "registered" if v in rec.poses else rec.failures.get(v, "unregistered")
        print(f"view {v} {status}")
    if "auc" in report:
        for tau, val in report["auc"].items():
            print(f"auc@{tau} {val:.6f}")
    print(f"points {sum(1 for t in rec.tracks if t.point is not None)}")
    print(f"report {out / 'report.json'}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    est = warpio.read_pose_file(args.est)
    gt = warpio.read_pose_file(args.gt)
    if set(est) != set(gt):
        only_est = sorted(set(est) - set(gt))
        only_gt = sorted(set(gt) - set(est))
        print(f"view id mismatch: est-only {only_est} gt-only {only_gt}", file=sys.stderr)
        return 5
    errors, skipped = evalsynth.pair_errors(est, gt)
    for e in errors:
        print(f"pair {e.i} {e.j} rra {e.rra:.9g} rta {e.rta:.9g}")
    for i, j in skipped:
        print(f"pair {i} {j} skipped zero-baseline")
    taus = [float(t) for t in args.tau.split(",") if t.strip()]
    for tau in taus:
        print(f"auc@{tau:g} {evalsynth.auc(errors, tau):.6f}")
    return 0


# ---------------------------------------------------------------------------
# sample (debug dump of selected tracks)
# ---------------------------------------------------------------------------


def cmd_sample(args) -> int:
    config = _config_from_args(args)
    try:
        manifest = warpio.read_manifest(args.manifest)
    except warpio.ManifestError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    pre = pipeline._Preprocessed(manifest, config)
    pre.estimate_pair_geometries()
    pre.calibrate_focals()
    init_poses = None
    if config.mode == "global" and (args.init_poses or manifest.init_poses):
        init_poses = warpio.read_pose_file(args.init_poses or manifest.init_poses)
    if config.mode == "incremental":
        pre.decompose_pairs()
    selected = sampling.sample_cycles(
        pre.warps, config.sampling, pre.resolutions, pre.view_ids,
        pre.make_score_fn(init_poses))
    text = sampling.dump_tracks(selected)
    if args.out:
        Path(args.out).write_text(text, "utf-8")
        print(f"wrote {len(selected)} tracks to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rigcal",
        description="camera self-calibration for rigid multi-view sets from dense warps")
    parser.add_argument("--version", action="version", version=f"rigcal {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic view set")
    p.add_argument("--config", required=True, help="JSON file of scene settings")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("calibrate", help="run a reconstruction pipeline")
    p.add_argument("manifest", nargs="?", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--from-report", default=None,
                   help="replay the echoed config of a previous report.json")
    _add_pipeline_flags(p)
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("eval", help="pairwise pose accuracy of two pose files")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--tau", default="3,30", help="comma-separated AUC thresholds, degrees")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sample", help="dump the selected cycle tracks")
    p.add_argument("manifest")
    p.add_argument("--out", default=None)
    _add_pipeline_flags(p)
    p.set_defaults(fn=cmd_sample)

    args = parser.parse_args(argv)
    if args.command == "calibrate" and not args.from_report and not args.manifest:
        parser.error("calibrate needs a manifest (or --from-report)")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
