"""Noisy planar odometry prior standing in for wheel/IMU dead reckoning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lotslam.core import Pose2, se2_compose, se2_inverse


@dataclass(frozen=True)
class OdomNoiseSpec:
    """Per-meter noise scales for simulated odometry increments."""

    sigma_trans: float = 0.0  # meters of translation noise per meter traveled
    sigma_rot: float = 0.0  # radians of heading noise per meter traveled
    bias_rot: float = 0.0  # deterministic radians per meter
    seed: int = 0

    def __post_init__(self):
        if self.sigma_trans < 0 or self.sigma_rot < 0:
            raise ValueError("noise sigmas must be non-negative")


def simulate_odometry(gt: list[Pose2], noise: OdomNoiseSpec) -> list[Pose2]:
    """Per-step relative transforms perturbed by seeded, length-scaled noise.

    Each true increment gets zero-mean Gaussian noise with standard deviation
    proportional to the step length, plus a deterministic rotational bias.
    """
    if len(gt) < 2:
        raise ValueError("need at least two poses")
    rng = np.random.default_rng(noise.seed)
    rels = []
    for a, b in zip(gt[:-1], gt[1:]):
        rel = se2_compose(se2_inverse(a), b)
        step = float(np.hypot(rel.x, rel.y))
        dx, dy = rng.normal(0.0, 1.0, 2) * (noise.sigma_trans * step)
        dth = rng.normal(0.0, 1.0) * (noise.sigma_rot * step) + noise.bias_rot * step
        rels.append(Pose2(rel.x + dx, rel.y + dy, rel.theta + dth))
    return rels


def integrate_odometry(start: Pose2, rels: list[Pose2]) -> list[Pose2]:
    """Dead-reckon a pose chain from a start pose and relative increments."""
    poses = [start]
    for rel in rels:
        poses.append(se2_compose(poses[-1], rel))
    return poses
