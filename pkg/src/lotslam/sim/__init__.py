"""Deterministic synthetic parking-lot world used in place of the camera stack."""

from lotslam.sim.scene import (
    AddPolygon,
    MarkerPolygon,
    RemovePolygon,
    Scene,
    TranslatePolygon,
    generate_lot,
    load_scene,
    perturb_scene,
    save_scene,
)
from lotslam.sim.trajectory import (
    TrajectorySpec,
    load_trajectory,
    sample_trajectory,
    save_trajectory,
)
from lotslam.sim.odometry import OdomNoiseSpec, simulate_odometry
from lotslam.sim.render import SemanticRaster, apply_label_dropout, render_semantic_raster

__all__ = [
    "AddPolygon",
    "MarkerPolygon",
    "OdomNoiseSpec",
    "RemovePolygon",
    "Scene",
    "SemanticRaster",
    "TranslatePolygon",
    "TrajectorySpec",
    "apply_label_dropout",
    "generate_lot",
    "load_scene",
    "load_trajectory",
    "perturb_scene",
    "render_semantic_raster",
    "sample_trajectory",
    "save_scene",
    "save_trajectory",
    "simulate_odometry",
]
