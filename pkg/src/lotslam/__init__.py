"""Ground-marker SLAM for parking lots: confidence-weighted line features,
normal-assisted point-to-line ICP, Bayesian batch fusion into a lightweight
vector map, and map-maintaining re-localization, all checked against a
deterministic simulator."""

__version__ = "0.1.0"

from lotslam.core import (
    Line2,
    Pose2,
    TrajectoryStats,
    point_to_line_distance,
    se2_apply,
    se2_boxminus,
    se2_boxplus,
    se2_compose,
    se2_inverse,
    trajectory_error,
)

__all__ = [
    "Line2",
    "Pose2",
    "TrajectoryStats",
    "point_to_line_distance",
    "se2_apply",
    "se2_boxminus",
    "se2_boxplus",
    "se2_compose",
    "se2_inverse",
    "trajectory_error",
    "__version__",
]
