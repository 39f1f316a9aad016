"""Command-line pipeline runner: map, localize, eval, render, gen-scene.

Exit codes: 0 success, 2 input/config error, 3 numerical failure. Every
command is deterministic under a fixed seed; wall-clock stage timings go to
a separate timings.json and never into the deterministic outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from lotslam import __version__
from lotslam.config import ConfigError, load_run_config
from lotslam.core import Pose2, trajectory_error
from lotslam.mapping import MapFormatError, load_map, save_map
from lotslam.plotting import render_map_figure
from lotslam.posegraph import GraphStructureError
from lotslam.registration import DegenerateGeometryError
from lotslam.pipeline import run_localization, run_mapping
from lotslam.sim import (
    generate_lot,
    load_scene,
    load_trajectory,
    sample_trajectory,
    save_scene,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3


class InputError(Exception):
    pass


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_trajectory_jsonl(path: Path, frames, poses, valids=None, ps=None) -> None:
    lines = []
    for k, (i, pose) in enumerate(zip(frames, poses)):
        rec = {
            "frame": int(i),
            "x": pose.x,
            "y": pose.y,
            "theta": pose.theta,
            "valid": (None if valids is None else bool(valids[k])),
            "p": (None if ps is None else float(ps[k])),
        }
        lines.append(json.dumps(rec, sort_keys=True))
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def _read_trajectory_jsonl(path: Path) -> list[Pose2]:
    poses = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, 1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                rec = json.loads(raw)
                poses.append(Pose2(float(rec["x"]), float(rec["y"]), float(rec["theta"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise InputError(f"{path}:{ln}: malformed trajectory line ({exc})") from None
    return poses


def _metrics_dict(stats, map_bytes, raw_bytes, loops, validity, icp_iters):
    return {
        "rmse_m": None if stats is None else stats.rmse,
        "max_m": None if stats is None else stats.max_err,
        "mean_m": None if stats is None else stats.mean_err,
        "nees": None if stats is None else stats.nees,
        "map_bytes": map_bytes,
        "raw_cloud_bytes": raw_bytes,
        "loop_closures": loops,
        "validity_fraction": validity,
        "mean_icp_iterations": (float(np.mean(icp_iters)) if icp_iters else 0.0),
        "stage_timings_ms": None,  # wall clock is never part of deterministic outputs
    }


def _load_session_inputs(args):
    cfg = load_run_config(args.config, out_dir=args.out, seed=args.seed, overrides=args.override)
    scene = load_scene(cfg.scene_path)
    spec = load_trajectory(cfg.trajectory_path)
    gt = sample_trajectory(spec)
    lut = cfg.load_calibration().build_lut()
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    return cfg, scene, gt, lut


def cmd_map(args) -> int:
    cfg, scene, gt, lut = _load_session_inputs(args)
    result = run_mapping(scene, gt, lut, cfg.noise, cfg.session)
    out = cfg.out_dir
    save_map(result.vector_map, out / "map.gsmap", binary=cfg.map_binary)
    _write_trajectory_jsonl(out / "traj_est.jsonl", result.frame_indices, result.trajectory_est)
    _write_trajectory_jsonl(out / "traj_gt.jsonl", result.frame_indices, result.trajectory_gt)
    _write_trajectory_jsonl(out / "traj_odom.jsonl", result.frame_indices, result.trajectory_dead_reckoned)
    stats = trajectory_error(result.trajectory_est, result.trajectory_gt)
    metrics = _metrics_dict(
        stats,
        result.map_bytes,
        result.raw_cloud_bytes,
        len(result.loop_closures),
        None,
        result.icp_iterations,
    )
    _write_json(out / "metrics.json", metrics)
    _write_json(out / "timings.json", result.timings.as_millis())
    render_map_figure(
        result.vector_map,
        [("gt", result.trajectory_gt), ("estimate", result.trajectory_est)],
        out / "render.svg",
    )
    print(f"map: {len(result.vector_map.batches)} batches, rmse {stats.rmse:.4f} m, "
          f"{len(result.loop_closures)} loop closures -> {out}")
    return EXIT_OK


def cmd_localize(args) -> int:
    cfg, scene, gt, lut = _load_session_inputs(args)
    if args.map is None:
        raise InputError("localize requires --map")
    vmap = load_map(args.map)
    result = run_localization(
        scene, gt, lut, cfg.noise, vmap, cfg.session, initial_guess=cfg.initial_guess
    )
    out = cfg.out_dir
    save_map(result.updated_map, out / "map_updated.gsmap", binary=cfg.map_binary)
    valids = [r.valid for r in result.results]
    ps = [r.overlap for r in result.results]
    _write_trajectory_jsonl(out / "traj_est.jsonl", result.frame_indices, result.trajectory_est, valids, ps)
    _write_trajectory_jsonl(out / "traj_gt.jsonl", result.frame_indices, result.trajectory_gt)
    stats = trajectory_error(result.trajectory_est, result.trajectory_gt)
    metrics = _metrics_dict(
        stats,
        len(open(args.map, "rb").read()) if Path(args.map).exists() else None,
        result.raw_cloud_bytes,
        None,
        result.validity_fraction,
        result.icp_iterations,
    )
    metrics["unanchored"] = result.unanchored
    _write_json(out / "metrics.json", metrics)
    _write_json(out / "timings.json", result.timings.as_millis())
    render_map_figure(
        result.updated_map,
        [("gt", result.trajectory_gt), ("estimate", result.trajectory_est)],
        out / "render.svg",
    )
    print(f"localize: validity {result.validity_fraction:.3f}, rmse {stats.rmse:.4f} m -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    gt = _read_trajectory_jsonl(Path(args.gt))
    est = _read_trajectory_jsonl(Path(args.est))
    stats = trajectory_error(est, gt)
    payload = {
        "rmse_m": stats.rmse,
        "max_m": stats.max_err,
        "mean_m": stats.mean_err,
        "nees": stats.nees,
        "poses": len(est),
    }
    print(f"{'metric':<10}{'value':>14}")
    for key in ("max_m", "mean_m", "rmse_m", "nees"):
        print(f"{key:<10}{payload[key]:>14.6f}")
    if args.out:
        _write_json(Path(args.out), payload)
    return EXIT_OK


def cmd_render(args) -> int:
    vmap = load_map(args.map)
    trajectories = []
    for tp in args.traj or []:
        trajectories.append((Path(tp).stem, _read_trajectory_jsonl(Path(tp))))
    out = Path(args.out if args.out else "render.svg")
    out.parent.mkdir(parents=True, exist_ok=True)
    render_map_figure(vmap, trajectories, out)
    print(f"rendered {len(vmap.batches)} batches -> {out}")
    return EXIT_OK


def cmd_gen_scene(args) -> int:
    scene = generate_lot(args.rows, args.slots, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_scene(scene, out)
    print(f"scene with {len(scene.polygons)} polygons -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lotslam", description=__doc__)
    ap.add_argument("--version", action="version", version=f"lotslam {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def session_args(p):
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="config override, dotted keys (repeatable)")

    p_map = sub.add_parser("map", help="run a mapping session")
    session_args(p_map)
    p_map.set_defaults(func=cmd_map)

    p_loc = sub.add_parser("localize", help="run a localization + map update session")
    session_args(p_loc)
    p_loc.add_argument("--map", required=True, help="prior map (.gsmap)")
    p_loc.set_defaults(func=cmd_localize)

    p_eval = sub.add_parser("eval", help="trajectory error between two jsonl files")
    p_eval.add_argument("--gt", required=True)
    p_eval.add_argument("--est", required=True)
    p_eval.add_argument("--out", default=None, help="optional metrics JSON output")
    p_eval.set_defaults(func=cmd_eval)

    p_render = sub.add_parser("render", help="render a map (and trajectories) to SVG")
    p_render.add_argument("--map", required=True)
    p_render.add_argument("--traj", action="append", default=[], help="trajectory jsonl (repeatable)")
    p_render.add_argument("--out", default="render.svg")
    p_render.set_defaults(func=cmd_render)

    p_gen = sub.add_parser("gen-scene", help="generate a deterministic parking-lot scene")
    p_gen.add_argument("--rows", type=int, default=2)
    p_gen.add_argument("--slots", type=int, default=10)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", default="scene.json")
    p_gen.set_defaults(func=cmd_gen_scene)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (GraphStructureError, DegenerateGeometryError, np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InputError, ConfigError, MapFormatError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
