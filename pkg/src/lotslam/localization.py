"""Re-localization against a prior map, sliding-window fusion, and map update.

Per frame, the live features register against map batches cropped around
the predicted pose; the overlap ratio gates validity. Valid results become
unary factors in a window graph that keeps only the ten most recent
localization anchors active, committing older poses permanently. Keyframes
built from committed poses update the prior map: matched batches gain
evidence and refreshed geometry, unmatched ones are appended, and mapped
batches that keep failing to be re-observed inside the sensor footprint
lose evidence until pruned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from lotslam.core import Pose2, se2_compose, se2_inverse
from lotslam.features import FrameFeatures, LineFeature
from lotslam.mapping import (
    Batch,
    Keyframe,
    MapBatch,
    MergeConfig,
    PRUNE_MIN_PROBABILITY,
    VectorMap,
    _best_merge_target,
    clamp_log_odds,
    fuse_batch,
    registration_information,
    sigmoid,
)
from lotslam.posegraph import Factor, PoseGraph, optimize_pose_graph
from lotslam.registration import (
    LineArrays,
    MatchConfig,
    lines_to_pseudo_frame,
    overlap_ratio,
    register,
)


@dataclass(frozen=True)
class LocalizationConfig:
    load_radius: float = 15.0
    p_valid_min: float = 0.5
    sample_spacing: float = 0.05
    match: MatchConfig = MatchConfig()
    merge: MergeConfig = MergeConfig()


@dataclass(frozen=True)
class LocalizationResult:
    frame_index: int
    pose: Pose2
    overlap: float
    valid: bool
    inlier_ratio: float
    information: np.ndarray | None = None


def localize_frame(
    frame: FrameFeatures,
    vmap: VectorMap,
    predicted: Pose2,
    cfg: LocalizationConfig = LocalizationConfig(),
) -> LocalizationResult:
    """Frame-to-map registration around a predicted pose.

    The map is cropped to batches within load_radius of the prediction;
    the result is valid only when registration converges and the overlap
    ratio reaches p_valid_min.
    """
    if not (math.isfinite(predicted.x) and math.isfinite(predicted.y)):
        raise ValueError("predicted pose must be finite")
    centers = np.array([[b.cx, b.cy] for b in vmap.batches]).reshape(-1, 2)
    if len(centers):
        near = (
            np.hypot(centers[:, 0] - predicted.x, centers[:, 1] - predicted.y) <= cfg.load_radius
        )
        cropped = [b.to_line_feature() for b, ok in zip(vmap.batches, near) if ok]
    else:
        cropped = []
    if not cropped or not frame.lines:
        return LocalizationResult(
            frame_index=frame.timestamp,
            pose=predicted,
            overlap=0.0,
            valid=False,
            inlier_ratio=0.0,
        )
    target = lines_to_pseudo_frame(cropped, cfg.sample_spacing)
    result = register(frame, target, predicted, cfg.match)
    p = overlap_ratio(frame.lines, cropped, result.transform, cfg.merge)
    valid = bool(result.converged and p >= cfg.p_valid_min)
    info = registration_information(result, len(frame.points)) if valid else None
    return LocalizationResult(
        frame_index=frame.timestamp,
        pose=result.transform,
        overlap=p,
        valid=valid,
        inlier_ratio=result.inlier_ratio,
        information=info,
    )


# ---------------------------------------------------------------------------
# Sliding-window trajectory fusion
# ---------------------------------------------------------------------------


@dataclass
class _Node:
    index: int
    estimate: Pose2
    odom_rel: Pose2 | None  # relative transform from the previous node
    odom_info: np.ndarray | None
    loc: LocalizationResult | None


@dataclass
class WindowGraph:
    """Active sliding-window state: recent localization anchors plus the
    odometry chain between them; committed poses are final."""

    window_size: int = 10
    nodes: list[_Node] = field(default_factory=list)
    boundary_pose: Pose2 | None = None  # committed pose preceding nodes[0]
    committed: list[tuple[int, Pose2]] = field(default_factory=list)

    @property
    def anchor_count(self) -> int:
        return sum(1 for n in self.nodes if n.loc is not None)


class TrajectoryFuser:
    """Fuses odometry increments with valid localization results.

    Emits committed (frame, pose) pairs as poses leave the sliding window;
    committed poses are never revised. With no prior and no valid
    localization the output stays in the odometry frame and the fuser
    reports itself unanchored.
    """

    def __init__(
        self,
        prior_pose: Pose2 | None = None,
        prior_information: np.ndarray | None = None,
        window_size: int = 10,
    ):
        self.graph = WindowGraph(window_size=window_size)
        self.prior_pose = prior_pose
        self.prior_information = (
            prior_information
            if prior_information is not None
            else np.diag([4.0, 4.0, 25.0])  # a 0.5 m / 0.2 rad initial guess
        )
        self.anchored = False

    def push(
        self,
        frame_index: int,
        odom_rel: Pose2 | None,
        odom_info: np.ndarray | None,
        loc: LocalizationResult | None,
    ) -> list[tuple[int, Pose2]]:
        nodes = self.graph.nodes
        if nodes:
            if odom_rel is None:
                raise ValueError("odometry increment required after the first frame")
            est = se2_compose(nodes[-1].estimate, odom_rel)
        elif self.graph.boundary_pose is not None:
            est = se2_compose(self.graph.boundary_pose, odom_rel or Pose2())
        else:
            est = self.prior_pose if self.prior_pose is not None else Pose2()
            if odom_rel is not None:
                est = se2_compose(est, odom_rel)
        use_loc = loc if (loc is not None and loc.valid) else None
        if use_loc is not None:
            self.anchored = True
        nodes.append(
            _Node(index=frame_index, estimate=est, odom_rel=odom_rel, odom_info=odom_info, loc=use_loc)
        )
        self._optimize()
        return self._marginalize()

    def finish(self) -> list[tuple[int, Pose2]]:
        self._optimize()
        out = [(n.index, n.estimate) for n in self.graph.nodes]
        self.graph.committed.extend(out)
        self.graph.nodes = []
        return out

    def current_estimate(self) -> Pose2 | None:
        if self.graph.nodes:
            return self.graph.nodes[-1].estimate
        if self.graph.committed:
            return self.graph.committed[-1][1]
        return self.prior_pose

    def _optimize(self) -> None:
        nodes = self.graph.nodes
        if not nodes:
            return
        anchored = self.graph.boundary_pose is not None or self.prior_pose is not None
        if not anchored and self.graph.anchor_count == 0:
            return  # pure dead reckoning; nothing to optimize against
        g = PoseGraph()
        for n in nodes:
            g.add_node(n.index, n.estimate)
        first = nodes[0]
        if self.graph.boundary_pose is not None:
            meas = se2_compose(self.graph.boundary_pose, first.odom_rel or Pose2())
            info = first.odom_info if first.odom_info is not None else np.diag([1e6, 1e6, 1e6])
            g.add_factor(Factor("prior", first.index, None, meas, info))
        elif self.prior_pose is not None:
            g.add_factor(Factor("prior", first.index, None, self.prior_pose, self.prior_information))
        for prev, cur in zip(nodes[:-1], nodes[1:]):
            info = cur.odom_info if cur.odom_info is not None else np.diag([1e6, 1e6, 1e6])
            g.add_factor(Factor("odometry", prev.index, cur.index, cur.odom_rel, info))
        for n in nodes:
            if n.loc is not None:
                info = (
                    n.loc.information
                    if n.loc.information is not None
                    else np.diag([1e4, 1e4, 1e4])
                )
                g.add_factor(Factor("localization", n.index, None, n.loc.pose, info))
        solution = optimize_pose_graph(g, max_iterations=25)
        for n in nodes:
            n.estimate = solution[n.index]

    def _marginalize(self) -> list[tuple[int, Pose2]]:
        graph = self.graph
        anchors = [k for k, n in enumerate(graph.nodes) if n.loc is not None]
        if len(anchors) <= graph.window_size:
            return []
        keep_from = anchors[-graph.window_size]
        emitted = []
        for n in graph.nodes[:keep_from]:
            emitted.append((n.index, n.estimate))
        graph.committed.extend(emitted)
        graph.boundary_pose = graph.nodes[keep_from - 1].estimate if keep_from > 0 else graph.boundary_pose
        graph.nodes = graph.nodes[keep_from:]
        return emitted


def fuse_window(
    odometry: list[Pose2 | None],
    localizations: list[LocalizationResult | None],
    odom_infos: list[np.ndarray | None] | None = None,
    prior_pose: Pose2 | None = None,
    window_size: int = 10,
) -> tuple[list[Pose2], bool]:
    """Batch convenience wrapper around TrajectoryFuser.

    odometry[i] is the increment from frame i-1 to frame i (odometry[0] is
    ignored / may be None). Returns the committed trajectory and an
    unanchored flag (True when neither a prior nor any valid localization
    tied the trajectory to the world frame).
    """
    if len(odometry) != len(localizations):
        raise ValueError("odometry and localization streams must align")
    fuser = TrajectoryFuser(prior_pose=prior_pose, window_size=window_size)
    infos = odom_infos if odom_infos is not None else [None] * len(odometry)
    committed: list[tuple[int, Pose2]] = []
    for i, (rel, loc) in enumerate(zip(odometry, localizations)):
        committed.extend(fuser.push(i, rel if i > 0 else None, infos[i], loc))
    committed.extend(fuser.finish())
    committed.sort(key=lambda t: t[0])
    poses = [p for _, p in committed]
    unanchored = not fuser.anchored and prior_pose is None
    return poses, unanchored


# ---------------------------------------------------------------------------
# Map update
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UpdateConfig:
    merge: MergeConfig = MergeConfig()
    prune_min: float = PRUNE_MIN_PROBABILITY
    negative_evidence: bool = True
    c_miss: float = 0.7  # miss observation strength for unseen mapped batches
    miss_radius: float = 4.0  # conservative sensor footprint radius


def update_map(vmap: VectorMap, keyframes: list[Keyframe], cfg: UpdateConfig = UpdateConfig()) -> VectorMap:
    """Merge localization-session keyframes into the prior map.

    Matched map batches accumulate the incoming batch's log-odds and take
    their geometry from the incoming observations (so a repeated identical
    pass reproduces identical geometry); unmatched incoming batches are
    appended. Optionally, mapped batches inside a keyframe's sensor
    footprint that received no match lose log((1-c_miss)/c_miss) per pass.
    """
    for kf in keyframes:
        if not (math.isfinite(kf.pose.x) and math.isfinite(kf.pose.y) and math.isfinite(kf.pose.theta)):
            raise ValueError(f"keyframe {kf.id} has a non-finite pose")

    entries = [
        {
            "line": b.to_line_feature(),
            "log_odds": b.log_odds,
            "obs_count": b.obs_count,
            "kf": b.keyframe_id,
        }
        for b in vmap.batches
    ]
    miss_penalty = math.log((1.0 - cfg.c_miss) / cfg.c_miss)

    for kf in sorted(keyframes, key=lambda k: k.id):
        matched = set()
        n_before = len(entries)
        targets = LineArrays.from_lines([e["line"] for e in entries])
        for batch in kf.batches:
            world_obs = [
                replace(o, geometry=o.geometry.transformed(kf.pose)) for o in batch.observations
            ]
            fused_world = replace(
                batch.fused_line, geometry=batch.fused_line.geometry.transformed(kf.pose)
            )
            best = _best_merge_target(fused_world, targets, cfg.merge)
            if best is None:
                entries.append(
                    {
                        "line": fused_world,
                        "log_odds": batch.log_odds,
                        "obs_count": batch.obs_count,
                        "kf": kf.id,
                    }
                )
            else:
                e = entries[best]
                e["log_odds"] = clamp_log_odds(e["log_odds"] + batch.log_odds)
                e["obs_count"] += batch.obs_count
                # Geometry refreshed purely from the incoming observations,
                # which keeps a second identical pass at a fixed point.
                tmp = Batch(
                    fused_line=fused_world,
                    log_odds=e["log_odds"],
                    observations=world_obs,
                    obs_count=e["obs_count"],
                )
                e["line"] = fuse_batch(tmp)
                matched.add(best)
        if cfg.negative_evidence:
            for idx, e in enumerate(entries[:n_before]):
                if idx in matched:
                    continue
                g = e["line"].geometry
                if math.hypot(g.centroid[0] - kf.pose.x, g.centroid[1] - kf.pose.y) <= cfg.miss_radius:
                    e["log_odds"] = clamp_log_odds(e["log_odds"] + miss_penalty)

    batches = [
        MapBatch.from_line(e["line"], e["log_odds"], e["obs_count"], e["kf"])
        for e in entries
        if sigmoid(e["log_odds"]) >= cfg.prune_min
    ]
    poses = list(vmap.keyframe_poses)
    known = {kid for kid, _ in poses}
    offset = (max(known) + 1) if known else 0
    for kf in sorted(keyframes, key=lambda k: k.id):
        poses.append((offset + kf.id, kf.pose))
    return VectorMap(version=vmap.version, batches=batches, keyframe_poses=poses)
