"""End-to-end sessions: simulate, extract, register, map, localize, update.

A mapping session renders frames along a ground-truth trajectory, estimates
odometry (frame-to-frame ICP or the noisy prior, per configuration), fuses
frames into keyframes, detects loop closures, optimizes the keyframe graph,
and assembles the vector map. A localization session runs odometry and
frame-to-map localization in lockstep, fuses them in the sliding window,
and updates the prior map from the committed trajectory.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from lotslam.camera import ProjectionLut
from lotslam.core import Pose2, se2_compose, se2_inverse, trajectory_error
from lotslam.features import FeatureParams, FrameFeatures, parameterize_frame
from lotslam.localization import (
    LocalizationConfig,
    LocalizationResult,
    TrajectoryFuser,
    UpdateConfig,
    localize_frame,
    update_map,
)
from lotslam.mapping import (
    Keyframe,
    KeyframeThresholds,
    LoopClosure,
    LoopConfig,
    MergeConfig,
    VectorMap,
    build_global_map,
    detect_loop,
    merge_frame_into_keyframe,
    registration_information,
    serialize_map,
    should_create_keyframe,
)
from lotslam.posegraph import Factor, PoseGraph, diagonal_information, optimize_pose_graph
from lotslam.registration import MatchConfig, register
from lotslam.sim import (
    OdomNoiseSpec,
    Scene,
    apply_label_dropout,
    render_semantic_raster,
    simulate_odometry,
)

RAW_POINT_BYTES = 24  # x, y, confidence as little-endian doubles


@dataclass
class SessionConfig:
    features: FeatureParams = field(default_factory=FeatureParams)
    match: MatchConfig = field(default_factory=MatchConfig)
    merge: MergeConfig = field(default_factory=MergeConfig)
    keyframe: KeyframeThresholds = field(default_factory=KeyframeThresholds)
    loop: LoopConfig = field(default_factory=LoopConfig)
    localization: LocalizationConfig = field(default_factory=LocalizationConfig)
    update: UpdateConfig = field(default_factory=UpdateConfig)
    odometry_mode: str = "icp"  # "icp" | "prior"
    label_dropout: float = 0.0
    frame_stride: int = 1
    dropout_seed: int = 0

    def __post_init__(self):
        if self.odometry_mode not in ("icp", "prior"):
            raise ValueError(f"unknown odometry mode: {self.odometry_mode!r}")
        if self.frame_stride < 1:
            raise ValueError("frame_stride must be >= 1")


@dataclass
class StageTimer:
    totals: dict[str, float] = field(default_factory=dict)

    def add(self, stage: str, seconds: float) -> None:
        self.totals[stage] = self.totals.get(stage, 0.0) + seconds

    def as_millis(self) -> dict[str, float]:
        return {k: v * 1000.0 for k, v in sorted(self.totals.items())}


class _Timed:
    def __init__(self, timer: StageTimer, stage: str):
        self.timer, self.stage = timer, stage

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.timer.add(self.stage, time.perf_counter() - self.t0)


def _odom_prior_information(rel: Pose2, noise: OdomNoiseSpec) -> np.ndarray:
    step = max(math.hypot(rel.x, rel.y), 1e-3)
    st = max(noise.sigma_trans * step, 2e-3)
    sr = max(noise.sigma_rot * step, 2e-4)
    return diagonal_information(st, st, sr)


def render_frames(
    scene: Scene,
    poses: list[Pose2],
    lut: ProjectionLut,
    cfg: SessionConfig,
    timer: StageTimer | None = None,
) -> tuple[list[int], list[FrameFeatures], int]:
    """Render + parameterize the (possibly strided) frames of a trajectory.

    Returns (frame indices, features, total raw contour point count).
    """
    timer = timer or StageTimer()
    indices = list(range(0, len(poses), cfg.frame_stride))
    frames = []
    raw_points = 0
    for i in indices:
        with _Timed(timer, "render"):
            raster = render_semantic_raster(scene, poses[i], lut)
            if cfg.label_dropout > 0:
                raster = apply_label_dropout(raster, cfg.label_dropout, cfg.dropout_seed + i)
        with _Timed(timer, "features"):
            frame = parameterize_frame(raster, lut, cfg.features, timestamp=i)
        raw_points += len(frame.points)
        frames.append(frame)
    return indices, frames, raw_points


@dataclass
class MappingResult:
    vector_map: VectorMap
    keyframes: list[Keyframe]
    trajectory_est: list[Pose2]  # per rendered frame, optimized
    trajectory_dead_reckoned: list[Pose2]
    trajectory_gt: list[Pose2]
    frame_indices: list[int]
    loop_closures: list[LoopClosure]
    icp_iterations: list[int]
    raw_cloud_bytes: int
    map_bytes: int
    timings: StageTimer


def run_mapping(
    scene: Scene,
    gt_poses: list[Pose2],
    lut: ProjectionLut,
    noise: OdomNoiseSpec,
    cfg: SessionConfig = SessionConfig(),
) -> MappingResult:
    timer = StageTimer()
    indices, frames, raw_points = render_frames(scene, gt_poses, lut, cfg, timer)
    gt_sub = [gt_poses[i] for i in indices]
    with _Timed(timer, "odometry_prior"):
        prior_rels = simulate_odometry(gt_sub, noise) if len(gt_sub) > 1 else []

    # Per-frame odometry increments (ICP-refined or prior-only).
    rels: list[Pose2] = []
    rel_infos: list[np.ndarray] = []
    icp_iterations: list[int] = []
    for k in range(1, len(frames)):
        prior_rel = prior_rels[k - 1]
        if cfg.odometry_mode == "icp":
            with _Timed(timer, "odometry_icp"):
                res = register(frames[k], frames[k - 1], prior_rel, cfg.match)
            icp_iterations.append(res.iterations)
            if res.converged:
                rels.append(res.transform)
                rel_infos.append(registration_information(res, len(frames[k].points)))
            else:
                rels.append(prior_rel)
                rel_infos.append(_odom_prior_information(prior_rel, noise))
        else:
            rels.append(prior_rel)
            rel_infos.append(_odom_prior_information(prior_rel, noise))

    # Dead-reckoned chain, anchored at the true start pose (shared world frame).
    dead = [gt_sub[0]]
    for rel in rels:
        dead.append(se2_compose(dead[-1], rel))

    # Keyframe bookkeeping. Relative transforms within a keyframe come from
    # the odometry chain, so later pose-graph updates do not disturb fusion.
    keyframes: list[Keyframe] = []
    kf_anchor_frame: list[int] = []  # frame index (within `frames`) of each keyframe
    graph = PoseGraph()
    loop_closures: list[LoopClosure] = []
    rel_from_kf = Pose2()
    rel_info_acc: list[np.ndarray] = []

    def current_pose_estimate(k: int) -> Pose2:
        return se2_compose(keyframes[-1].pose, rel_from_kf)

    def reoptimize() -> None:
        with _Timed(timer, "optimize"):
            solution = optimize_pose_graph(graph)
        for kf in keyframes:
            kf.pose = solution[kf.id]

    for k, frame in enumerate(frames):
        if not keyframes:
            kf = Keyframe(id=0, pose=dead[0])
            keyframes.append(kf)
            kf_anchor_frame.append(0)
            graph.add_node(0, kf.pose)
            graph.add_factor(Factor("prior", 0, None, kf.pose, np.diag([1e8, 1e8, 1e8])))
            with _Timed(timer, "keyframe_merge"):
                merge_frame_into_keyframe(kf, frame, Pose2(), cfg.merge)
            continue

        rel = rels[k - 1]
        rel_from_kf = se2_compose(rel_from_kf, rel)
        rel_info_acc.append(rel_infos[k - 1])
        if should_create_keyframe(rel_from_kf, cfg.keyframe):
            prev = keyframes[-1]
            new_id = prev.id + 1
            new_pose = se2_compose(prev.pose, rel_from_kf)
            kf = Keyframe(id=new_id, pose=new_pose)
            keyframes.append(kf)
            kf_anchor_frame.append(k)
            graph.add_node(new_id, new_pose)
            # Covariances add along the chain; approximate with summed variances.
            var = np.zeros(3)
            for info in rel_info_acc:
                var += 1.0 / np.maximum(np.diag(info), 1e-12)
            info = np.diag(1.0 / np.maximum(var, 1e-12))
            graph.add_factor(Factor("odometry", prev.id, new_id, rel_from_kf, info))
            rel_from_kf = Pose2()
            rel_info_acc = []
            with _Timed(timer, "keyframe_merge"):
                merge_frame_into_keyframe(kf, frame, Pose2(), cfg.merge)
            # Loop detection for the just-completed previous keyframe.
            with _Timed(timer, "loop_detect"):
                closure = _try_loop(prev, keyframes, loop_closures, cfg)
            if closure is not None:
                loop_closures.append(closure)
                graph.add_factor(
                    Factor("loop", closure.candidate_id, closure.current_id, closure.measurement, closure.information)
                )
                reoptimize()
        else:
            with _Timed(timer, "keyframe_merge"):
                merge_frame_into_keyframe(keyframes[-1], frame, rel_from_kf, cfg.merge)

    if keyframes:
        with _Timed(timer, "loop_detect"):
            closure = _try_loop(keyframes[-1], keyframes, loop_closures, cfg)
        if closure is not None:
            loop_closures.append(closure)
            graph.add_factor(
                Factor("loop", closure.candidate_id, closure.current_id, closure.measurement, closure.information)
            )
        reoptimize()

    # Optimized per-frame trajectory: keyframe pose times the odometry chain.
    est: list[Pose2] = []
    kf_idx = -1
    chain = Pose2()
    for k in range(len(frames)):
        if kf_idx + 1 < len(keyframes) and kf_anchor_frame[kf_idx + 1] == k:
            kf_idx += 1
            chain = Pose2()
        elif k > 0:
            chain = se2_compose(chain, rels[k - 1])
        est.append(se2_compose(keyframes[kf_idx].pose, chain))

    with _Timed(timer, "map_build"):
        vmap = build_global_map(keyframes, cfg.merge, cfg.update.prune_min)
        map_bytes = len(serialize_map(vmap, binary=True))

    return MappingResult(
        vector_map=vmap,
        keyframes=keyframes,
        trajectory_est=est,
        trajectory_dead_reckoned=dead,
        trajectory_gt=gt_sub,
        frame_indices=indices,
        loop_closures=loop_closures,
        icp_iterations=icp_iterations,
        raw_cloud_bytes=raw_points * RAW_POINT_BYTES,
        map_bytes=map_bytes,
        timings=timer,
    )


def _try_loop(
    current: Keyframe,
    keyframes: list[Keyframe],
    accepted: list[LoopClosure],
    cfg: SessionConfig,
) -> LoopClosure | None:
    candidates = [kf for kf in keyframes if current.id - kf.id >= cfg.loop.kf_gap]
    if not candidates:
        return None
    if any(c.current_id == current.id for c in accepted):
        return None
    # Before any closure constrains the graph the initial guess may be far
    # off; afterwards the estimates are trustworthy and a single init does.
    thorough = len(accepted) == 0
    return detect_loop(current, candidates, cfg.loop, thorough=thorough)


@dataclass
class LocalizationSessionResult:
    trajectory_est: list[Pose2]  # committed, per rendered frame
    trajectory_gt: list[Pose2]
    frame_indices: list[int]
    results: list[LocalizationResult]
    updated_map: VectorMap
    keyframes: list[Keyframe]
    validity_fraction: float
    unanchored: bool
    icp_iterations: list[int]
    raw_cloud_bytes: int
    timings: StageTimer


def run_localization(
    scene: Scene,
    gt_poses: list[Pose2],
    lut: ProjectionLut,
    noise: OdomNoiseSpec,
    vmap: VectorMap,
    cfg: SessionConfig = SessionConfig(),
    initial_guess: Pose2 | None = None,
    do_update: bool = True,
) -> LocalizationSessionResult:
    timer = StageTimer()
    indices, frames, raw_points = render_frames(scene, gt_poses, lut, cfg, timer)
    gt_sub = [gt_poses[i] for i in indices]
    with _Timed(timer, "odometry_prior"):
        prior_rels = simulate_odometry(gt_sub, noise) if len(gt_sub) > 1 else []

    prior_pose = initial_guess if initial_guess is not None else gt_sub[0]
    fuser = TrajectoryFuser(prior_pose=prior_pose)
    results: list[LocalizationResult] = []
    icp_iterations: list[int] = []
    committed: list[tuple[int, Pose2]] = []

    for k, frame in enumerate(frames):
        if k == 0:
            rel, rel_info = None, None
        else:
            prior_rel = prior_rels[k - 1]
            if cfg.odometry_mode == "icp":
                with _Timed(timer, "odometry_icp"):
                    res = register(frames[k], frames[k - 1], prior_rel, cfg.match)
                icp_iterations.append(res.iterations)
                if res.converged:
                    rel = res.transform
                    rel_info = registration_information(res, len(frame.points))
                else:
                    rel = prior_rel
                    rel_info = _odom_prior_information(prior_rel, noise)
            else:
                rel = prior_rels[k - 1]
                rel_info = _odom_prior_information(rel, noise)
        base = fuser.current_estimate() or prior_pose
        predicted = se2_compose(base, rel) if rel is not None else base
        with _Timed(timer, "localize"):
            loc = localize_frame(frame, vmap, predicted, cfg.localization)
        results.append(loc)
        with _Timed(timer, "fuse"):
            committed.extend(fuser.push(k, rel, rel_info, loc))
    committed.extend(fuser.finish())
    committed.sort(key=lambda t: t[0])
    est = [p for _, p in committed]

    # Keyframes over the committed trajectory, for the map update.
    keyframes: list[Keyframe] = []
    last_kf_pose: Pose2 | None = None
    for k, frame in enumerate(frames):
        pose = est[k]
        if last_kf_pose is None or should_create_keyframe(
            se2_compose(se2_inverse(last_kf_pose), pose), cfg.keyframe
        ):
            kf = Keyframe(id=len(keyframes), pose=pose)
            keyframes.append(kf)
            last_kf_pose = pose
        t_kf_frame = se2_compose(se2_inverse(keyframes[-1].pose), pose)
        with _Timed(timer, "keyframe_merge"):
            merge_frame_into_keyframe(keyframes[-1], frame, t_kf_frame, cfg.merge)

    if do_update:
        with _Timed(timer, "map_update"):
            updated = update_map(vmap, keyframes, cfg.update)
    else:
        updated = vmap

    validity = float(np.mean([1.0 if r.valid else 0.0 for r in results])) if results else 0.0
    return LocalizationSessionResult(
        trajectory_est=est,
        trajectory_gt=gt_sub,
        frame_indices=indices,
        results=results,
        updated_map=updated,
        keyframes=keyframes,
        validity_fraction=validity,
        unanchored=not fuser.anchored and initial_guess is None,
        icp_iterations=icp_iterations,
        raw_cloud_bytes=raw_points * RAW_POINT_BYTES,
        timings=timer,
    )
