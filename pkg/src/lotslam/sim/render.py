"""Semantic raster rendering through the camera LUT, run in reverse.

For every LUT-valid pixel we transform its vehicle-frame ground point into
the world by the capture pose and sample polygon membership; this produces
exactly the label raster a segmentation network plus IPM would deliver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lotslam.camera import ProjectionLut
from lotslam.core import Pose2, se2_apply
from lotslam.labels import BACKGROUND
from lotslam.sim.scene import Scene, classify_points


@dataclass(frozen=True)
class SemanticRaster:
    """Per-pixel marker class codes (0 = background) plus the capture pose."""

    labels: np.ndarray  # (H, W) uint8
    pose: Pose2

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]


def render_semantic_raster(scene: Scene, pose: Pose2, lut: ProjectionLut) -> SemanticRaster:
    labels = np.zeros((lut.height, lut.width), dtype=np.uint8)
    pts = lut.valid_ground_points
    if len(pts) and scene.polygons:
        world = se2_apply(pose, pts)
        codes = classify_points(scene, world)
        rows, cols = lut.valid_pixel_indices
        labels[rows, cols] = codes
    labels.flags.writeable = False
    return SemanticRaster(labels=labels, pose=pose)


def apply_label_dropout(raster: SemanticRaster, prob: float, seed: int) -> SemanticRaster:
    """Flip labeled pixels to background with the given probability, seeded.

    The random draw covers the full image so the result is independent of
    scene content for a fixed seed.
    """
    if prob <= 0:
        return raster
    rng = np.random.default_rng(seed)
    drops = rng.random(raster.labels.shape) < prob
    labels = np.where(drops, np.uint8(BACKGROUND), raster.labels)
    labels.flags.writeable = False
    return SemanticRaster(labels=labels, pose=raster.pose)
