"""Ground-truth trajectories sampled along waypoint polylines."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from lotslam.core import Pose2
from lotslam.sim.scene import dump_json_17g

TRAJECTORY_VERSION = 1

KINDS = ("loop", "out_and_back", "extension")


@dataclass(frozen=True)
class TrajectorySpec:
    waypoints: np.ndarray  # (N, 2) positions in meters
    speed: float  # m/s
    frame_rate: float  # Hz
    kind: str = "extension"

    def __post_init__(self):
        w = np.asarray(self.waypoints, dtype=float).reshape(-1, 2)
        if self.kind not in KINDS:
            raise ValueError(f"unknown trajectory kind: {self.kind!r}")
        if self.frame_rate <= 0 or self.speed <= 0:
            raise ValueError("speed and frame_rate must be positive")
        if len(w) < 2:
            raise ValueError("need at least two waypoints")
        object.__setattr__(self, "waypoints", w)

    def expanded_waypoints(self) -> np.ndarray:
        w = self.waypoints
        if self.kind == "loop" and not np.allclose(w[0], w[-1]):
            w = np.vstack([w, w[0]])
        elif self.kind == "out_and_back":
            w = np.vstack([w, w[-2::-1]])
        return w


def sample_trajectory(spec: TrajectorySpec) -> list[Pose2]:
    """Poses spaced speed/frame_rate apart along the waypoint polyline.

    Headings follow the local path tangent (central differences of the
    sampled positions, one-sided at the ends).
    """
    w = spec.expanded_waypoints()
    seg = np.diff(w, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = float(cum[-1])
    if total <= 0:
        raise ValueError("zero-length trajectory")
    step = spec.speed / spec.frame_rate
    n = int(math.floor(total / step + 1e-9))
    s = np.arange(n + 1) * step
    xs = np.interp(s, cum, w[:, 0])
    ys = np.interp(s, cum, w[:, 1])
    pos = np.column_stack([xs, ys])
    if len(pos) < 2:
        raise ValueError("trajectory shorter than one frame step")
    fwd = np.empty_like(pos)
    fwd[1:-1] = pos[2:] - pos[:-2]
    fwd[0] = pos[1] - pos[0]
    fwd[-1] = pos[-1] - pos[-2]
    theta = np.arctan2(fwd[:, 1], fwd[:, 0])
    return [Pose2(float(p[0]), float(p[1]), float(t)) for p, t in zip(pos, theta)]


def trajectory_to_dict(spec: TrajectorySpec) -> dict:
    return {
        "version": TRAJECTORY_VERSION,
        "kind": spec.kind,
        "speed": spec.speed,
        "frame_rate": spec.frame_rate,
        "waypoints": spec.waypoints.tolist(),
    }


def trajectory_from_dict(data: dict) -> TrajectorySpec:
    if data.get("version") != TRAJECTORY_VERSION:
        raise ValueError(f"unsupported trajectory version: {data.get('version')!r}")
    return TrajectorySpec(
        waypoints=np.array(data["waypoints"], dtype=float),
        speed=float(data["speed"]),
        frame_rate=float(data["frame_rate"]),
        kind=data.get("kind", "extension"),
    )


def save_trajectory(spec: TrajectorySpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_json_17g(trajectory_to_dict(spec)))


def load_trajectory(path) -> TrajectorySpec:
    with open(path, "r", encoding="utf-8") as fh:
        return trajectory_from_dict(json.load(fh))
