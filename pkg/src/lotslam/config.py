"""Run configuration: one JSON artifact plus repeatable flag overrides."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from lotslam.camera import CameraCalibration, default_calibration, load_calibration
from lotslam.core import Pose2
from lotslam.features import FeatureParams
from lotslam.localization import LocalizationConfig, UpdateConfig
from lotslam.mapping import KeyframeThresholds, LoopConfig, MergeConfig
from lotslam.pipeline import SessionConfig
from lotslam.registration import MatchConfig
from lotslam.sim import OdomNoiseSpec


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scene_path: Path
    trajectory_path: Path
    calibration_path: Path | None
    seed: int
    out_dir: Path
    noise: OdomNoiseSpec
    session: SessionConfig
    initial_guess: Pose2 | None = None
    map_binary: bool = True

    def load_calibration(self) -> CameraCalibration:
        if self.calibration_path is None:
            return default_calibration()
        return load_calibration(self.calibration_path)


_SECTION_TYPES = {
    "features": FeatureParams,
    "match": MatchConfig,
    "merge": MergeConfig,
    "keyframe": KeyframeThresholds,
    "loop": LoopConfig,
    "localization": LocalizationConfig,
    "update": UpdateConfig,
}

_SESSION_SCALARS = ("odometry_mode", "label_dropout", "frame_stride", "dropout_seed")


def _coerce(current, raw):
    if isinstance(current, bool):
        if isinstance(raw, bool):
            return raw
        if str(raw).lower() in ("1", "true", "yes", "on"):
            return True
        if str(raw).lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {raw!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, str):
        return str(raw)
    if isinstance(current, tuple):
        if isinstance(raw, (list, tuple)):
            return tuple(float(v) for v in raw)
        return tuple(float(v) for v in str(raw).split(","))
    raise ConfigError(f"cannot override field of type {type(current)!r}")


def _apply_section(obj, updates: dict):
    for key, raw in updates.items():
        if not hasattr(obj, key):
            raise ConfigError(f"{type(obj).__name__} has no parameter {key!r}")
        cur = getattr(obj, key)
        if dataclasses.is_dataclass(cur) and not isinstance(cur, type):
            obj = dataclasses.replace(obj, **{key: _apply_section(cur, raw)})
        else:
            obj = dataclasses.replace(obj, **{key: _coerce(cur, raw)})
    return obj


def build_session_config(params: dict) -> SessionConfig:
    session = SessionConfig()
    known = set(_SECTION_TYPES) | set(_SESSION_SCALARS)
    for key in params:
        if key not in known:
            raise ConfigError(f"unknown parameter section {key!r}")
    kwargs = {}
    for name in _SESSION_SCALARS:
        if name in params:
            kwargs[name] = _coerce(getattr(session, name), params[name])
    for name, _cls in _SECTION_TYPES.items():
        base = getattr(session, name if name != "keyframe" else "keyframe")
        if name in params:
            kwargs[name] = _apply_section(base, params[name])
    if kwargs:
        session = dataclasses.replace(session, **kwargs)
    # Keep the shared sub-configs consistent unless explicitly overridden.
    if "merge" in params and "loop" not in params:
        session = dataclasses.replace(session, loop=dataclasses.replace(session.loop, merge=session.merge))
    if "merge" in params:
        session = dataclasses.replace(
            session,
            localization=dataclasses.replace(session.localization, merge=session.merge),
            update=dataclasses.replace(session.update, merge=session.merge),
        )
    if "match" in params:
        session = dataclasses.replace(
            session,
            localization=dataclasses.replace(session.localization, match=session.match),
        )
    return session


def _set_dotted(tree: dict, dotted: str, value: str) -> None:
    parts = dotted.split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override path {dotted!r} conflicts with a scalar")
    node[parts[-1]] = value


def load_run_config(
    path,
    out_dir=None,
    seed=None,
    overrides: list[str] | None = None,
) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"bad config JSON: {exc}") from None

    tree = dict(data)
    for ov in overrides or []:
        if "=" not in ov:
            raise ConfigError(f"override must be key=value, got {ov!r}")
        key, value = ov.split("=", 1)
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        _set_dotted(tree, key, parsed)

    base = path.parent

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    for req in ("scene", "trajectory"):
        if req not in tree:
            raise ConfigError(f"config missing required field {req!r}")
    scene_path = resolve(tree["scene"])
    trajectory_path = resolve(tree["trajectory"])
    calibration_path = resolve(tree["calibration"]) if tree.get("calibration") else None
    for p, name in ((scene_path, "scene"), (trajectory_path, "trajectory")):
        if not p.exists():
            raise ConfigError(f"{name} file not found: {p}")
    if calibration_path is not None and not calibration_path.exists():
        raise ConfigError(f"calibration file not found: {calibration_path}")

    run_seed = int(seed if seed is not None else tree.get("seed", 0))
    noise_cfg = tree.get("noise", {})
    noise = OdomNoiseSpec(
        sigma_trans=float(noise_cfg.get("sigma_trans", 0.0)),
        sigma_rot=float(noise_cfg.get("sigma_rot", 0.0)),
        bias_rot=float(noise_cfg.get("bias_rot", 0.0)),
        seed=int(noise_cfg.get("seed", run_seed)),
    )
    session = build_session_config(tree.get("params", {}))
    session = dataclasses.replace(session, dropout_seed=int(tree.get("dropout_seed", run_seed)))
    if "odometry_mode" in tree:
        session = dataclasses.replace(session, odometry_mode=str(tree["odometry_mode"]))
    if "label_dropout" in tree:
        session = dataclasses.replace(session, label_dropout=float(tree["label_dropout"]))
    if "frame_stride" in tree:
        session = dataclasses.replace(session, frame_stride=int(tree["frame_stride"]))

    guess = None
    if tree.get("initial_guess") is not None:
        g = tree["initial_guess"]
        if len(g) != 3 or not all(math.isfinite(float(v)) for v in g):
            raise ConfigError("initial_guess must be [x, y, theta]")
        guess = Pose2(float(g[0]), float(g[1]), float(g[2]))

    out = Path(out_dir) if out_dir is not None else Path(tree.get("out", "run_out"))
    if not out.is_absolute() and out_dir is None:
        out = base / out
    return RunConfig(
        scene_path=scene_path,
        trajectory_path=trajectory_path,
        calibration_path=calibration_path,
        seed=run_seed,
        out_dir=out,
        noise=noise,
        session=session,
        initial_guess=guess,
        map_binary=bool(tree.get("map_binary", True)),
    )
