"""Keyframes, probabilistic batch fusion, loop closure, and the vector map.

Line observations accumulated between keyframes are merged into batches.
Every batch keeps its best observations plus a log-odds stability score fed
by each observation's confidence; the global map is the pose-transformed,
coalesced union of keyframe batches, stored vectorized (one fixed-size
record per batch).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from lotslam.core import Line2, Pose2, wrap_angle
from lotslam.features import FrameFeatures, LineFeature
from lotslam.posegraph import (
    Factor,
    GraphStructureError,
    PoseGraph,
    diagonal_information,
    optimize_pose_graph,
)
from lotslam.registration import (
    LineArrays,
    MatchConfig,
    MergeConfig,
    RegistrationResult,
    ROT_INFO_LEVER_M,
    lines_to_pseudo_frame,
    mergeable_matrix,
    overlap_ratio,
    register,
)

LOG_ODDS_CAP = 12.0
CONF_CLAMP = (0.05, 0.95)
BATCH_TOP_K = 5
PRUNE_MIN_PROBABILITY = 0.3
MAP_MAGIC = b"GSMAP"
MAP_FORMAT_VERSION = 1


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def log_odds_increment(confidence: float) -> float:
    """Evidence contributed by one observation, with confidence clamped away
    from 0 and 1 where the update would diverge."""
    c = min(max(confidence, CONF_CLAMP[0]), CONF_CLAMP[1])
    return math.log(c / (1.0 - c))


def clamp_log_odds(lo: float) -> float:
    return min(max(lo, -LOG_ODDS_CAP), LOG_ODDS_CAP)


@dataclass(frozen=True)
class KeyframeThresholds:
    translation: float = 0.5  # meters
    rotation: float = math.radians(10.0)


def should_create_keyframe(delta: Pose2, thresholds: KeyframeThresholds = KeyframeThresholds()) -> bool:
    return (
        math.hypot(delta.x, delta.y) >= thresholds.translation
        or abs(delta.theta) >= thresholds.rotation
    )


@dataclass
class Batch:
    """A fused line plus its best observations and stability score.

    Observations are stored in keyframe-local coordinates, ordered by
    descending confidence, at most BATCH_TOP_K of them; obs_count counts
    every observation ever merged.
    """

    fused_line: LineFeature
    log_odds: float
    observations: list[LineFeature]
    obs_count: int

    def add_observation(self, line: LineFeature) -> None:
        self.observations.append(line)
        self.observations.sort(key=lambda l: -l.confidence)
        del self.observations[BATCH_TOP_K:]
        self.obs_count += 1
        self.log_odds = clamp_log_odds(self.log_odds + log_odds_increment(line.confidence))
        self.fused_line = fuse_batch(self)

    @property
    def probability(self) -> float:
        return sigmoid(self.log_odds)

    @classmethod
    def from_line(cls, line: LineFeature) -> "Batch":
        return cls(
            fused_line=line,
            log_odds=clamp_log_odds(log_odds_increment(line.confidence)),
            observations=[line],
            obs_count=1,
        )


def fuse_batch(batch: Batch) -> LineFeature:
    """Average the best-observed lines of a batch into one line feature.

    Centroid and normal are confidence-weighted means, the direction is the
    principal direction of the stacked member endpoints, and the endpoints
    are the extreme projections of all member endpoints onto it.
    """
    obs = batch.observations
    if not obs:
        raise ValueError("cannot fuse an empty batch")
    if len(obs) == 1:
        return obs[0]
    w = np.array([o.confidence for o in obs])
    wsum = float(w.sum())
    if wsum <= 0:
        w = np.ones(len(obs))
        wsum = float(len(obs))
    centroids = np.array([o.geometry.centroid for o in obs])
    centroid = (w[:, None] * centroids).sum(axis=0) / wsum

    endpoints = np.concatenate(
        [np.stack([o.geometry.endpoint_a, o.geometry.endpoint_b]) for o in obs]
    )
    ew = np.repeat(w, 2)
    emean = (ew[:, None] * endpoints).sum(axis=0) / ew.sum()
    centered = endpoints - emean
    scatter = (centered * ew[:, None]).T @ centered
    _, evecs = np.linalg.eigh(scatter)
    direction = evecs[:, -1]
    ref = obs[0].geometry.direction
    if float(direction @ ref) < 0:
        direction = -direction

    normals = np.array([o.geometry.normal for o in obs])
    raw_normal = (w[:, None] * normals).sum(axis=0) / wsum
    perp = raw_normal - (raw_normal @ direction) * direction
    nlen = float(np.linalg.norm(perp))
    if nlen > 1e-12:
        normal = perp / nlen
    else:
        normal = np.array([-direction[1], direction[0]])
        if raw_normal @ normal < 0:
            normal = -normal

    proj = (endpoints - centroid) @ direction
    a = centroid + proj.min() * direction
    b = centroid + proj.max() * direction
    confidence = float((w * w).sum() / wsum)
    return LineFeature(
        geometry=Line2(centroid, direction, normal, a, b),
        label=obs[0].label,
        confidence=confidence,
        point_count=int(sum(o.point_count for o in obs)),
        contour_id=-1,
    )


@dataclass
class Keyframe:
    id: int
    pose: Pose2  # world pose, updated by optimization
    batches: list[Batch] = field(default_factory=list)

    def fused_lines(self) -> list[LineFeature]:
        return [b.fused_line for b in self.batches]


def _best_merge_target(line: LineFeature, targets: LineArrays, cfg: MergeConfig):
    """Index of the best mergeable target line (min perpendicular centroid
    offset, ties to the lowest index), or None."""
    if len(targets) == 0:
        return None
    ok = mergeable_matrix(LineArrays.from_lines([line]), targets, cfg)[0]
    if not ok.any():
        return None
    diff = line.geometry.centroid[None, :] - targets.centroids
    perp = np.abs(np.einsum("dj,dj->d", diff, targets.normals))
    perp = np.where(ok, perp, np.inf)
    return int(np.argmin(perp))


def merge_frame_into_keyframe(
    kf: Keyframe,
    frame: FrameFeatures,
    t_kf_frame: Pose2,
    cfg: MergeConfig = MergeConfig(),
) -> Keyframe:
    """Fuse a frame's lines into the keyframe's batches (in place).

    Each line transformed into keyframe coordinates either joins the best
    matching batch (appending an observation and bumping its log-odds) or
    seeds a new batch.
    """
    for line in frame.lines:
        moved = replace(line, geometry=line.geometry.transformed(t_kf_frame))
        targets = LineArrays.from_lines([b.fused_line for b in kf.batches])
        best = _best_merge_target(moved, targets, cfg)
        if best is None:
            kf.batches.append(Batch.from_line(moved))
        else:
            kf.batches[best].add_observation(moved)
    return kf


# ---------------------------------------------------------------------------
# Loop closure
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LoopConfig:
    search_radius: float = 10.0
    kf_gap: int = 20
    p_min: float = 0.6
    sample_spacing: float = 0.05
    coarse_cell: float = 0.25
    coarse_window: float = 8.0
    coarse_peaks: int = 3
    coarse_rotations: tuple[float, ...] = (-0.2, -0.1, 0.0, 0.1, 0.2)
    match: MatchConfig = MatchConfig()
    merge: MergeConfig = MergeConfig()


@dataclass(frozen=True)
class LoopClosure:
    candidate_id: int
    current_id: int
    measurement: Pose2  # pose of current keyframe in the candidate frame
    information: np.ndarray
    overlap: float
    registration: RegistrationResult


def _occupancy_grid(points: np.ndarray, cell: float, half: float) -> np.ndarray:
    n = int(round(2 * half / cell))
    grid = np.zeros((n, n))
    ij = np.floor((points + half) / cell).astype(int)
    ok = (ij >= 0).all(axis=1) & (ij < n).all(axis=1)
    np.add.at(grid, (ij[ok, 1], ij[ok, 0]), 1.0)
    return np.minimum(grid, 1.0)


def _coarse_translation_offsets(
    src_pts: np.ndarray, dst_pts: np.ndarray, cfg: LoopConfig
) -> list[tuple[float, float]]:
    """Top cross-correlation peaks between rasterized point sets, as (dx, dy)
    offsets to add to the source points (both in the dst frame)."""
    cell, half = cfg.coarse_cell, cfg.coarse_window
    a = _occupancy_grid(dst_pts, cell, half)
    b = _occupancy_grid(src_pts, cell, half)
    n = a.shape[0]
    fa = np.fft.rfft2(a, s=(2 * n, 2 * n))
    fb = np.fft.rfft2(b, s=(2 * n, 2 * n))
    corr = np.fft.irfft2(fa * np.conj(fb), s=(2 * n, 2 * n))
    corr = np.fft.fftshift(corr)
    offsets = []
    c = corr.copy()
    suppress = max(int(1.0 / cell), 1)
    for _ in range(cfg.coarse_peaks):
        iy, ix = np.unravel_index(int(np.argmax(c)), c.shape)
        if c[iy, ix] <= 0:
            break
        offsets.append(((ix - n) * cell, (iy - n) * cell))
        y0, y1 = max(iy - suppress, 0), min(iy + suppress + 1, c.shape[0])
        x0, x1 = max(ix - suppress, 0), min(ix + suppress + 1, c.shape[1])
        c[y0:y1, x0:x1] = -np.inf
    return offsets


def registration_information(result: RegistrationResult, n_points: int) -> np.ndarray:
    """Information for a registration-derived factor, scaled by inlier count."""
    inliers = max(result.inlier_ratio * n_points, 1.0)
    rms = max(result.final_rms_residual, 1e-3)
    info_t = min(inliers / (rms * rms), 1e8)
    info_r = min(info_t * ROT_INFO_LEVER_M**2, 1e8)
    return np.diag([info_t, info_t, info_r])


def detect_loop(
    current: Keyframe,
    candidates: list[Keyframe],
    cfg: LoopConfig = LoopConfig(),
    thorough: bool = False,
) -> LoopClosure | None:
    """Register the current keyframe against nearby, much older keyframes.

    A candidate is accepted when registration converges and the overlap
    ratio of the current keyframe's lines against the candidate's batches
    reaches p_min; the best-overlap acceptance wins. With thorough=True a
    coarse correlation search seeds extra initializations, which covers the
    large initial misalignment before the first loop closure of a drifting
    run.
    """
    cur_lines = current.fused_lines()
    if not cur_lines:
        return None
    cur_pseudo = lines_to_pseudo_frame(cur_lines, cfg.sample_spacing)
    best: LoopClosure | None = None
    for cand in candidates:
        if current.id - cand.id < cfg.kf_gap:
            continue
        d = math.hypot(cand.pose.x - current.pose.x, cand.pose.y - current.pose.y)
        if d > cfg.search_radius:
            continue
        cand_lines = cand.fused_lines()
        if not cand_lines:
            continue
        cand_pseudo = lines_to_pseudo_frame(cand_lines, cfg.sample_spacing)
        init0 = cand.pose.inverse().compose(current.pose)
        inits = [init0]
        if thorough:
            src_pts = init0.apply(cur_pseudo.points.positions)
            dst_pts = cand_pseudo.points.positions
            for rot in cfg.coarse_rotations:
                spun = Pose2(init0.x, init0.y, init0.theta + rot)
                src_rot = spun.apply(cur_pseudo.points.positions)
                for dx, dy in _coarse_translation_offsets(src_rot, dst_pts, cfg):
                    inits.append(Pose2(spun.x + dx, spun.y + dy, spun.theta))
        for init in inits:
            result = register(cur_pseudo, cand_pseudo, init, cfg.match)
            if not result.converged:
                continue
            p = overlap_ratio(cur_lines, cand_lines, result.transform, cfg.merge)
            if p < cfg.p_min:
                continue
            if best is None or p > best.overlap:
                best = LoopClosure(
                    candidate_id=cand.id,
                    current_id=current.id,
                    measurement=result.transform,
                    information=registration_information(result, len(cur_pseudo.points)),
                    overlap=p,
                    registration=result,
                )
    return best


# ---------------------------------------------------------------------------
# Vector map
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MapBatch:
    """Vectorized world-frame batch record (the unit of map storage)."""

    cx: float
    cy: float
    direction_angle: float
    normal_angle: float
    ex1: float
    ey1: float
    ex2: float
    ey2: float
    label: int
    log_odds: float
    obs_count: int
    keyframe_id: int

    def to_line_feature(self) -> LineFeature:
        d = np.array([math.cos(self.direction_angle), math.sin(self.direction_angle)])
        n = np.array([math.cos(self.normal_angle), math.sin(self.normal_angle)])
        n = n - (n @ d) * d
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            n = np.array([-d[1], d[0]])
        else:
            n = n / norm
        centroid = np.array([self.cx, self.cy])
        ea = np.array([self.ex1, self.ey1])
        eb = np.array([self.ex2, self.ey2])
        # Snap stored endpoints onto the stored line to keep Line2 invariants.
        ea = centroid + float((ea - centroid) @ d) * d
        eb = centroid + float((eb - centroid) @ d) * d
        conf = min(max(sigmoid(self.log_odds), CONF_CLAMP[0]), CONF_CLAMP[1])
        return LineFeature(
            geometry=Line2(centroid, d, n, ea, eb),
            label=self.label,
            confidence=conf,
            point_count=self.obs_count,
            contour_id=-1,
        )

    @classmethod
    def from_line(cls, line: LineFeature, log_odds: float, obs_count: int, keyframe_id: int) -> "MapBatch":
        g = line.geometry
        return cls(
            cx=float(g.centroid[0]),
            cy=float(g.centroid[1]),
            direction_angle=wrap_angle(math.atan2(g.direction[1], g.direction[0])),
            normal_angle=wrap_angle(math.atan2(g.normal[1], g.normal[0])),
            ex1=float(g.endpoint_a[0]),
            ey1=float(g.endpoint_a[1]),
            ex2=float(g.endpoint_b[0]),
            ey2=float(g.endpoint_b[1]),
            label=int(line.label),
            log_odds=float(log_odds),
            obs_count=int(obs_count),
            keyframe_id=int(keyframe_id),
        )

    @property
    def probability(self) -> float:
        return sigmoid(self.log_odds)


@dataclass
class VectorMap:
    version: int = MAP_FORMAT_VERSION
    batches: list[MapBatch] = field(default_factory=list)
    keyframe_poses: list[tuple[int, Pose2]] = field(default_factory=list)

    def lines(self) -> list[LineFeature]:
        return [b.to_line_feature() for b in self.batches]


def build_global_map(
    keyframes: list[Keyframe],
    merge_cfg: MergeConfig = MergeConfig(),
    prune_min: float = PRUNE_MIN_PROBABILITY,
) -> VectorMap:
    """Transform keyframe batches to the world and coalesce duplicates.

    Batches from different keyframes that satisfy the merge predicate are
    combined: log-odds summed (capped), lines re-fused from the pooled best
    observations. Batches whose stability falls below prune_min are dropped.
    """
    world: list[dict] = []
    for kf in sorted(keyframes, key=lambda k: k.id):
        for batch in kf.batches:
            moved_obs = [
                replace(o, geometry=o.geometry.transformed(kf.pose)) for o in batch.observations
            ]
            fused_world = replace(batch.fused_line, geometry=batch.fused_line.geometry.transformed(kf.pose))
            targets = LineArrays.from_lines([w["fused"] for w in world])
            best = _best_merge_target(fused_world, targets, merge_cfg)
            if best is None:
                world.append(
                    {
                        "fused": fused_world,
                        "log_odds": batch.log_odds,
                        "obs_count": batch.obs_count,
                        "obs": list(moved_obs),
                        "kf": kf.id,
                    }
                )
            else:
                entry = world[best]
                entry["log_odds"] = clamp_log_odds(entry["log_odds"] + batch.log_odds)
                entry["obs_count"] += batch.obs_count
                pool = entry["obs"] + moved_obs
                pool.sort(key=lambda l: -l.confidence)
                entry["obs"] = pool[:BATCH_TOP_K]
                tmp = Batch(
                    fused_line=entry["fused"],
                    log_odds=entry["log_odds"],
                    observations=entry["obs"],
                    obs_count=entry["obs_count"],
                )
                entry["fused"] = fuse_batch(tmp)

    batches = [
        MapBatch.from_line(e["fused"], e["log_odds"], e["obs_count"], e["kf"])
        for e in world
        if sigmoid(e["log_odds"]) >= prune_min
    ]
    poses = [(kf.id, kf.pose) for kf in sorted(keyframes, key=lambda k: k.id)]
    return VectorMap(batches=batches, keyframe_poses=poses)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_BATCH_FIELDS = ("cx", "cy", "dir", "nrm", "ex1", "ey1", "ex2", "ey2", "label", "logodds", "nobs", "kf")


class MapFormatError(ValueError):
    pass


def _map_payload(m: VectorMap) -> dict:
    return {
        "version": m.version,
        "keyframes": [
            {"id": kid, "x": p.x, "y": p.y, "theta": p.theta} for kid, p in m.keyframe_poses
        ],
        "batches": [
            {
                "cx": b.cx,
                "cy": b.cy,
                "dir": b.direction_angle,
                "nrm": b.normal_angle,
                "ex1": b.ex1,
                "ey1": b.ey1,
                "ex2": b.ex2,
                "ey2": b.ey2,
                "label": b.label,
                "logodds": b.log_odds,
                "nobs": b.obs_count,
                "kf": b.keyframe_id,
            }
            for b in m.batches
        ],
    }


def _check_finite(values) -> None:
    for v in values:
        if not math.isfinite(v):
            raise MapFormatError("non-finite value in map")


def serialize_map(m: VectorMap, binary: bool = True) -> bytes:
    header = MAP_MAGIC + struct.pack("<IB", MAP_FORMAT_VERSION, 1 if binary else 0)
    payload = _map_payload(m)
    for kf in payload["keyframes"]:
        _check_finite((kf["x"], kf["y"], kf["theta"]))
    for b in payload["batches"]:
        _check_finite((b[k] for k in _BATCH_FIELDS))
    if not binary:
        body = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
        return header + body
    out = [header, struct.pack("<II", len(payload["keyframes"]), len(payload["batches"]))]
    for kf in payload["keyframes"]:
        out.append(struct.pack("<4d", float(kf["id"]), kf["x"], kf["y"], kf["theta"]))
    for b in payload["batches"]:
        out.append(struct.pack("<12d", *(float(b[k]) for k in _BATCH_FIELDS)))
    return b"".join(out)


def deserialize_map(data: bytes) -> VectorMap:
    if len(data) < len(MAP_MAGIC) + 5:
        raise MapFormatError("truncated map header")
    if data[: len(MAP_MAGIC)] != MAP_MAGIC:
        raise MapFormatError("bad magic bytes")
    version, flag = struct.unpack_from("<IB", data, len(MAP_MAGIC))
    if version != MAP_FORMAT_VERSION:
        raise MapFormatError(f"unsupported map format version {version}")
    body = data[len(MAP_MAGIC) + 5 :]
    if flag == 0:
        try:
            payload = json.loads(body.decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise MapFormatError(f"bad JSON map body: {exc}") from None
        kfs = payload.get("keyframes", [])
        batches = payload.get("batches", [])
    elif flag == 1:
        if len(body) < 8:
            raise MapFormatError("truncated map body")
        n_kf, n_batch = struct.unpack_from("<II", body, 0)
        need = 8 + 32 * n_kf + 96 * n_batch
        if len(body) != need:
            raise MapFormatError(f"map body size mismatch: {len(body)} != {need}")
        kfs, batches = [], []
        off = 8
        for _ in range(n_kf):
            kid, x, y, theta = struct.unpack_from("<4d", body, off)
            off += 32
            kfs.append({"id": kid, "x": x, "y": y, "theta": theta})
        for _ in range(n_batch):
            vals = struct.unpack_from("<12d", body, off)
            off += 96
            batches.append(dict(zip(_BATCH_FIELDS, vals)))
    else:
        raise MapFormatError(f"unknown body flag {flag}")

    poses = []
    for kf in kfs:
        _check_finite((kf["x"], kf["y"], kf["theta"]))
        poses.append((int(kf["id"]), Pose2(kf["x"], kf["y"], kf["theta"])))
    out_batches = []
    for b in batches:
        _check_finite((b[k] for k in _BATCH_FIELDS))
        out_batches.append(
            MapBatch(
                cx=float(b["cx"]),
                cy=float(b["cy"]),
                direction_angle=float(b["dir"]),
                normal_angle=float(b["nrm"]),
                ex1=float(b["ex1"]),
                ey1=float(b["ey1"]),
                ex2=float(b["ex2"]),
                ey2=float(b["ey2"]),
                label=int(b["label"]),
                log_odds=float(b["logodds"]),
                obs_count=int(b["nobs"]),
                keyframe_id=int(b["kf"]),
            )
        )
    return VectorMap(version=version, batches=out_batches, keyframe_poses=poses)


def save_map(m: VectorMap, path, binary: bool = True) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_map(m, binary=binary))


def load_map(path) -> VectorMap:
    with open(path, "rb") as fh:
        return deserialize_map(fh.read())
