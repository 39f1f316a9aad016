"""Planar geometry primitives and trajectory error metrics.

Everything here is a pure function on immutable values: SE(2) poses,
2D line features, and the error statistics used to score estimated
trajectories against ground truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    t = theta % TWO_PI  # [0, 2pi)
    if t > math.pi:
        t -= TWO_PI
    return t


def wrap_angle_array(theta: np.ndarray) -> np.ndarray:
    t = np.mod(theta, TWO_PI)
    return np.where(t > math.pi, t - TWO_PI, t)


@dataclass(frozen=True)
class Pose2:
    """SE(2) pose: translation in meters, heading in radians, theta in (-pi, pi]."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))

    @property
    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def compose(self, other: "Pose2") -> "Pose2":
        return se2_compose(self, other)

    def inverse(self) -> "Pose2":
        return se2_inverse(self)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return se2_apply(self, points)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])


IDENTITY = Pose2()


def se2_compose(a: Pose2, b: Pose2) -> Pose2:
    """Compose two poses: the result applies b first, then a."""
    ca, sa = math.cos(a.theta), math.sin(a.theta)
    return Pose2(
        a.x + ca * b.x - sa * b.y,
        a.y + sa * b.x + ca * b.y,
        a.theta + b.theta,
    )


def se2_inverse(p: Pose2) -> Pose2:
    c, s = math.cos(p.theta), math.sin(p.theta)
    return Pose2(-(c * p.x + s * p.y), -(-s * p.x + c * p.y), -p.theta)


def se2_apply(t: Pose2, points: np.ndarray) -> np.ndarray:
    """Rigid transform R(theta) @ p + t for a point (2,) or point array (N, 2)."""
    p = np.asarray(points, dtype=float)
    c, s = math.cos(t.theta), math.sin(t.theta)
    if p.ndim == 1:
        return np.array([c * p[0] - s * p[1] + t.x, s * p[0] + c * p[1] + t.y])
    out = np.empty_like(p)
    out[:, 0] = c * p[:, 0] - s * p[:, 1] + t.x
    out[:, 1] = s * p[:, 0] + c * p[:, 1] + t.y
    return out


def se2_boxminus(a: Pose2, b: Pose2) -> np.ndarray:
    """Local-frame difference of b^-1 o a as (dx, dy, dtheta), dtheta in (-pi, pi]."""
    d = se2_compose(se2_inverse(b), a)
    return np.array([d.x, d.y, d.theta])


def se2_boxplus(b: Pose2, delta: np.ndarray) -> Pose2:
    """Retract a local increment onto a pose; inverse of se2_boxminus."""
    return se2_compose(b, Pose2(float(delta[0]), float(delta[1]), float(delta[2])))


@dataclass(frozen=True)
class Line2:
    """An oriented 2D line segment fitted to contour points.

    direction and normal are unit vectors with direction perpendicular to
    normal; both endpoints lie on the infinite line through the centroid.
    The normal points from the marker interior to its exterior.
    """

    centroid: np.ndarray
    direction: np.ndarray
    normal: np.ndarray
    endpoint_a: np.ndarray
    endpoint_b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "centroid", np.asarray(self.centroid, dtype=float))
        object.__setattr__(self, "direction", np.asarray(self.direction, dtype=float))
        object.__setattr__(self, "normal", np.asarray(self.normal, dtype=float))
        object.__setattr__(self, "endpoint_a", np.asarray(self.endpoint_a, dtype=float))
        object.__setattr__(self, "endpoint_b", np.asarray(self.endpoint_b, dtype=float))

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.endpoint_a - self.endpoint_b))

    def validate(self, tol_unit: float = 1e-9, tol_on_line: float = 1e-6) -> None:
        """Raise ValueError when the segment invariants do not hold."""
        if abs(np.linalg.norm(self.direction) - 1.0) > tol_unit:
            raise ValueError("direction is not unit length")
        if abs(np.linalg.norm(self.normal) - 1.0) > tol_unit:
            raise ValueError("normal is not unit length")
        if abs(float(self.direction @ self.normal)) > 1e-9:
            raise ValueError("direction and normal are not perpendicular")
        for ep in (self.endpoint_a, self.endpoint_b):
            if abs(float(self.normal @ (ep - self.centroid))) > tol_on_line:
                raise ValueError("endpoint off the infinite line")

    def transformed(self, t: Pose2) -> "Line2":
        r = t.rotation
        return Line2(
            se2_apply(t, self.centroid),
            r @ self.direction,
            r @ self.normal,
            se2_apply(t, self.endpoint_a),
            se2_apply(t, self.endpoint_b),
        )


def point_to_line_distance(p: np.ndarray, line: Line2) -> float:
    """Signed perpendicular distance; positive on the side the normal points to."""
    p = np.asarray(p, dtype=float)
    return float(line.normal @ (p - line.centroid))


@dataclass(frozen=True)
class TrajectoryStats:
    """Translational error aggregates for an estimated trajectory.

    nees is rmse normalized by the total ground-truth path length.
    """

    max_err: float
    mean_err: float
    rmse: float
    nees: float


def trajectory_error(est: list[Pose2], gt: list[Pose2]) -> TrajectoryStats:
    """Per-pose translational errors against ground truth in a shared world frame."""
    if len(est) != len(gt):
        raise ValueError(f"trajectory length mismatch: {len(est)} vs {len(gt)}")
    if not est:
        raise ValueError("empty trajectory")
    e = np.array([[p.x, p.y] for p in est])
    g = np.array([[p.x, p.y] for p in gt])
    err = np.linalg.norm(e - g, axis=1)
    length = float(np.sum(np.linalg.norm(np.diff(g, axis=0), axis=1))) if len(gt) > 1 else 0.0
    rmse = float(np.sqrt(np.mean(err**2)))
    if length > 0:
        nees = rmse / length
    else:
        nees = 0.0 if rmse == 0.0 else float("inf")
    return TrajectoryStats(
        max_err=float(err.max()),
        mean_err=float(err.mean()),
        rmse=rmse,
        nees=nees,
    )
