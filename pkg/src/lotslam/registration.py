"""Point-to-line ICP with contour-normal-assisted matching, plus the
line-merge predicate and overlap ratio used for loop/localization gating.

Association follows the two-stage scheme: nearest target point first, then
the best line among that point's contour restricted to consistent contour
normals and matching labels. A plain nearest-line baseline mode exists for
the efficiency comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from lotslam.core import Line2, Pose2, se2_apply, se2_compose
from lotslam.features import ContourCloud, FrameFeatures, LineFeature

WHEELBASE_M = 2.7  # scales rotation into the step-norm convergence test
ROT_INFO_LEVER_M = 2.0  # lever arm turning translation info into rotation info


class DegenerateGeometryError(RuntimeError):
    """Normal equations too ill-conditioned to solve (e.g. all lines parallel)."""


@dataclass(frozen=True)
class MatchConfig:
    max_point_distance: float = 1.0
    normal_angle_max: float = math.radians(30.0)
    max_iterations: int = 30
    epsilon: float = 1e-4
    huber_delta: float = 0.10
    mode: str = "normal_assisted"  # or "nearest_neighbor_baseline"

    def __post_init__(self):
        if min(self.max_point_distance, self.normal_angle_max, self.max_iterations, self.epsilon, self.huber_delta) <= 0:
            raise ValueError("match parameters must be positive")
        if self.mode not in ("normal_assisted", "nearest_neighbor_baseline"):
            raise ValueError(f"unknown mode: {self.mode!r}")


@dataclass(frozen=True)
class MergeConfig:
    """Thresholds deciding whether one line can be merged into another."""

    normal_angle: float = math.radians(20.0)
    direction_angle: float = math.radians(10.0)
    distance: float = 0.15


@dataclass(frozen=True)
class Correspondence:
    point_index: int
    target_line_index: int
    weight: float


@dataclass
class Correspondences:
    """Matched point -> line pairs as parallel arrays."""

    point_index: np.ndarray
    line_index: np.ndarray
    weight: np.ndarray

    def __len__(self) -> int:
        return len(self.point_index)

    def __iter__(self):
        for i in range(len(self)):
            yield Correspondence(
                int(self.point_index[i]), int(self.line_index[i]), float(self.weight[i])
            )


@dataclass(frozen=True)
class RegistrationResult:
    transform: Pose2
    iterations: int
    final_rms_residual: float
    inlier_ratio: float
    converged: bool


@dataclass
class LineArrays:
    """Column layout of a line feature list for vectorized geometry tests."""

    centroids: np.ndarray
    directions: np.ndarray
    normals: np.ndarray
    ea: np.ndarray
    eb: np.ndarray
    labels: np.ndarray
    confidences: np.ndarray
    lengths: np.ndarray

    @classmethod
    def from_lines(cls, lines: list[LineFeature]) -> "LineArrays":
        if not lines:
            z2 = np.zeros((0, 2))
            return cls(z2, z2.copy(), z2.copy(), z2.copy(), z2.copy(), np.zeros(0, np.int32), np.zeros(0), np.zeros(0))
        return cls(
            centroids=np.array([l.geometry.centroid for l in lines]),
            directions=np.array([l.geometry.direction for l in lines]),
            normals=np.array([l.geometry.normal for l in lines]),
            ea=np.array([l.geometry.endpoint_a for l in lines]),
            eb=np.array([l.geometry.endpoint_b for l in lines]),
            labels=np.array([l.label for l in lines], dtype=np.int32),
            confidences=np.array([l.confidence for l in lines]),
            lengths=np.array([l.geometry.length for l in lines]),
        )

    def __len__(self) -> int:
        return len(self.labels)

    def transformed(self, t: Pose2) -> "LineArrays":
        r = t.rotation
        return LineArrays(
            centroids=se2_apply(t, self.centroids),
            directions=self.directions @ r.T,
            normals=self.normals @ r.T,
            ea=se2_apply(t, self.ea),
            eb=se2_apply(t, self.eb),
            labels=self.labels,
            confidences=self.confidences,
            lengths=self.lengths,
        )


class TargetIndex:
    """Search structures over a target frame: a point k-d tree and, per
    contour, the (padded) list of lines fitted from it."""

    def __init__(self, frame: FrameFeatures):
        self.frame = frame
        self.lines = LineArrays.from_lines(frame.lines)
        pts = frame.points.positions
        self.tree = cKDTree(pts) if len(pts) else None
        self.point_contours = frame.points.contour_ids

        cids = np.unique(self.point_contours) if len(pts) else np.zeros(0, np.int64)
        cid_to_row = {int(c): i for i, c in enumerate(cids)}
        per_contour: list[list[int]] = [[] for _ in cids]
        for li, line in enumerate(frame.lines):
            row = cid_to_row.get(int(line.contour_id))
            if row is not None:
                per_contour[row].append(li)
        width = max((len(v) for v in per_contour), default=0)
        pad = np.full((len(cids), max(width, 1)), -1, dtype=np.int64)
        for row, items in enumerate(per_contour):
            pad[row, : len(items)] = items
        self.contour_line_pad = pad
        self.point_rows = (
            np.array([cid_to_row[int(c)] for c in self.point_contours], dtype=np.int64)
            if len(pts)
            else np.zeros(0, np.int64)
        )


def frame_target_index(frame: FrameFeatures) -> TargetIndex:
    return TargetIndex(frame)


def lines_to_pseudo_frame(lines: list[LineFeature], spacing: float = 0.05, timestamp: int = 0) -> FrameFeatures:
    """Sample lines into a synthetic frame: points along each segment carrying
    the line's normal, label, and confidence; each line forms its own contour."""
    if not lines:
        return FrameFeatures(points=ContourCloud.empty(), lines=[], timestamp=timestamp)
    parts = []
    relabeled = []
    for li, line in enumerate(lines):
        g = line.geometry
        n = max(int(math.ceil(g.length / spacing)), 1) + 1
        ts = np.linspace(0.0, 1.0, n)
        pos = g.endpoint_a[None, :] * (1 - ts[:, None]) + g.endpoint_b[None, :] * ts[:, None]
        parts.append(
            ContourCloud(
                positions=pos,
                labels=np.full(n, line.label, dtype=np.int32),
                contour_ids=np.full(n, li, dtype=np.int32),
                seqs=np.arange(n, dtype=np.int32),
                normals=np.tile(g.normal, (n, 1)),
                confidences=np.full(n, line.confidence),
            )
        )
        relabeled.append(replace(line, contour_id=li))
    cloud = ContourCloud(
        positions=np.vstack([p.positions for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
        contour_ids=np.concatenate([p.contour_ids for p in parts]),
        seqs=np.concatenate([p.seqs for p in parts]),
        normals=np.vstack([p.normals for p in parts]),
        confidences=np.concatenate([p.confidences for p in parts]),
    )
    return FrameFeatures(points=cloud, lines=relabeled, timestamp=timestamp)


def associate(
    src: FrameFeatures,
    dst: FrameFeatures | TargetIndex,
    transform: Pose2,
    cfg: MatchConfig = MatchConfig(),
) -> Correspondences:
    """Match source points to target lines under the current transform.

    normal_assisted: nearest target point within the distance gate selects a
    contour; among that contour's lines with matching label and a contour
    normal within normal_angle_max of the point's, the closest line by
    unsigned point-to-line distance wins (ties to the lowest line index).
    nearest_neighbor_baseline: the contour and normal restrictions are
    dropped and the nearest label-matching line wins.
    """
    index = dst if isinstance(dst, TargetIndex) else TargetIndex(dst)
    empty = Correspondences(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
    n_src = len(src.points)
    if n_src == 0 or index.tree is None or len(index.lines) == 0:
        return empty

    pts = se2_apply(transform, src.points.positions)
    rot = transform.rotation
    nrm = src.points.normals @ rot.T
    has_normal = ~np.isnan(nrm).any(axis=1)

    dist, qidx = index.tree.query(pts)
    gate = dist <= cfg.max_point_distance
    if cfg.mode == "normal_assisted":
        gate &= has_normal
    if not gate.any():
        return empty

    gi = np.flatnonzero(gate)
    la = index.lines
    if cfg.mode == "normal_assisted":
        cand = index.contour_line_pad[index.point_rows[qidx[gi]]]  # (G, K)
        ok = cand >= 0
        safe = np.where(ok, cand, 0)
        ok &= la.labels[safe] == src.points.labels[gi, None]
        ndot = np.einsum("gj,gkj->gk", nrm[gi], la.normals[safe])
        ok &= ndot >= math.cos(cfg.normal_angle_max)
        diff = pts[gi, None, :] - la.centroids[safe]
        pdist = np.abs(np.einsum("gkj,gkj->gk", diff, la.normals[safe]))
    else:
        cand = np.broadcast_to(np.arange(len(la), dtype=np.int64), (len(gi), len(la)))
        safe = cand
        ok = la.labels[None, :] == src.points.labels[gi, None]
        diff = pts[gi, None, :] - la.centroids[None, :, :]
        pdist = np.abs(np.einsum("gkj,kj->gk", diff, la.normals))

    pdist = np.where(ok, pdist, np.inf)
    best = np.argmin(pdist, axis=1)  # first minimum -> lowest line index
    best_d = pdist[np.arange(len(gi)), best]
    matched = np.isfinite(best_d)
    if not matched.any():
        return empty
    pi = gi[matched]
    li = safe[np.arange(len(gi)), best][matched]
    weight = src.points.confidences[pi] * la.confidences[li]
    return Correspondences(point_index=pi, line_index=li.astype(np.int64), weight=weight)


def _residuals(corr: Correspondences, src: FrameFeatures, la: LineArrays, transform: Pose2):
    p = se2_apply(transform, src.points.positions[corr.point_index])
    n = la.normals[corr.line_index]
    c = la.centroids[corr.line_index]
    r = np.einsum("ij,ij->i", n, p - c)
    return r, p, n


def _huber_weights(r: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))


def solve_step(
    corr: Correspondences,
    src: FrameFeatures,
    dst: FrameFeatures | TargetIndex,
    transform: Pose2,
    huber_delta: float = 0.10,
) -> np.ndarray:
    """One Gauss-Newton step on the weighted Huber point-to-line cost.

    Returns the left-multiplied increment (dx, dy, dtheta). Raises
    DegenerateGeometryError for under-constrained geometry.
    """
    index = dst if isinstance(dst, TargetIndex) else TargetIndex(dst)
    if len(corr) < 3:
        raise DegenerateGeometryError(f"{len(corr)} correspondences (need >= 3)")
    r, p, n = _residuals(corr, src, index.lines, transform)
    w = corr.weight * _huber_weights(r, huber_delta)
    # Jacobian rows: [n_x, n_y, n . J p] with J the +90 degree rotation.
    jp = np.column_stack([-p[:, 1], p[:, 0]])
    J = np.column_stack([n, np.einsum("ij,ij->i", n, jp)])
    A = (J * w[:, None]).T @ J
    b = (J * w[:, None]).T @ r
    if np.linalg.cond(A) > 1e8:
        raise DegenerateGeometryError("normal equations ill-conditioned (parallel lines?)")
    return -np.linalg.solve(A, b)


def _weighted_rms(r: np.ndarray, w: np.ndarray) -> float:
    sw = float(np.sum(w))
    if sw <= 0:
        return 0.0
    return math.sqrt(float(np.sum(w * r * r)) / sw)


def register(
    src: FrameFeatures,
    dst: FrameFeatures | TargetIndex,
    init: Pose2 = Pose2(),
    cfg: MatchConfig = MatchConfig(),
) -> RegistrationResult:
    """Iterate associate + solve until the increment norm drops below epsilon.

    The increment norm is |dt| + wheelbase * |dtheta|. Steps that would raise
    the (frozen-weight) RMS residual are halved before being accepted, so the
    residual trace is non-increasing.
    """
    index = dst if isinstance(dst, TargetIndex) else TargetIndex(dst)
    transform = init
    iterations = 0
    converged = False
    last_corr = None

    for _ in range(cfg.max_iterations):
        corr = associate(src, index, transform, cfg)
        last_corr = corr
        try:
            delta = solve_step(corr, src, index, transform, cfg.huber_delta)
        except DegenerateGeometryError:
            break
        r0, _, _ = _residuals(corr, src, index.lines, transform)
        w = corr.weight * _huber_weights(r0, cfg.huber_delta)
        rms0 = _weighted_rms(r0, w)
        accepted = None
        for _halving in range(5):
            candidate = se2_compose(Pose2(*delta), transform)
            r1, _, _ = _residuals(corr, src, index.lines, candidate)
            if _weighted_rms(r1, w) <= rms0 + 1e-15:
                accepted = candidate
                break
            delta = delta / 2.0
        iterations += 1
        if accepted is None:
            break
        transform = accepted
        step = float(np.hypot(delta[0], delta[1])) + WHEELBASE_M * abs(float(delta[2]))
        if step < cfg.epsilon:
            converged = True
            break

    if last_corr is None or len(last_corr) == 0:
        final_rms = float("inf")
        inlier_ratio = 0.0
        if iterations == 0:
            transform = init
    else:
        last_corr = associate(src, index, transform, cfg)
        if len(last_corr):
            r, _, _ = _residuals(last_corr, src, index.lines, transform)
            final_rms = math.sqrt(float(np.mean(r * r)))
        else:
            final_rms = float("inf")
        inlier_ratio = len(last_corr) / max(len(src.points), 1)
    if iterations == 0:
        transform = init

    return RegistrationResult(
        transform=transform,
        iterations=iterations,
        final_rms_residual=final_rms,
        inlier_ratio=inlier_ratio,
        converged=converged,
    )


# ---------------------------------------------------------------------------
# Merge predicate and overlap ratio
# ---------------------------------------------------------------------------


def _interval_along(direction, origin, pa, pb):
    sa = np.einsum("...j,...j->...", pa - origin, direction)
    sb = np.einsum("...j,...j->...", pb - origin, direction)
    return np.minimum(sa, sb), np.maximum(sa, sb)


def mergeable_matrix(src: LineArrays, dst: LineArrays, cfg: MergeConfig = MergeConfig()) -> np.ndarray:
    """(S, D) boolean matrix: src line i can be merged into dst line j.

    Requires matching labels, contour normals within normal_angle, undirected
    directions within direction_angle, centroid within distance of the dst
    line, and overlapping projection intervals along the dst direction.
    """
    if len(src) == 0 or len(dst) == 0:
        return np.zeros((len(src), len(dst)), dtype=bool)
    ok = src.labels[:, None] == dst.labels[None, :]
    ndot = src.normals @ dst.normals.T
    ok &= ndot >= math.cos(cfg.normal_angle)
    ddot = np.abs(src.directions @ dst.directions.T)
    ok &= ddot >= math.cos(cfg.direction_angle)
    diff = src.centroids[:, None, :] - dst.centroids[None, :, :]
    perp = np.abs(np.einsum("sdj,dj->sd", diff, dst.normals))
    ok &= perp <= cfg.distance
    lo_s, hi_s = _interval_along(
        dst.directions[None, :, :], dst.centroids[None, :, :], src.ea[:, None, :], src.eb[:, None, :]
    )
    lo_d, hi_d = _interval_along(dst.directions, dst.centroids, dst.ea, dst.eb)
    ok &= (hi_s >= lo_d[None, :]) & (hi_d[None, :] >= lo_s)
    return ok


def line_mergeable(src: LineFeature, dst: LineFeature, cfg: MergeConfig = MergeConfig()) -> bool:
    m = mergeable_matrix(LineArrays.from_lines([src]), LineArrays.from_lines([dst]), cfg)
    return bool(m[0, 0])


def overlap_ratio(
    src_lines: list[LineFeature],
    dst_lines: list[LineFeature],
    transform: Pose2 = Pose2(),
    cfg: MergeConfig = MergeConfig(),
) -> float:
    """Length-and-confidence weighted fraction of src lines mergeable into dst."""
    if not src_lines:
        return 0.0
    src = LineArrays.from_lines(src_lines).transformed(transform)
    dst = LineArrays.from_lines(dst_lines)
    weights = src.lengths * src.confidences
    total = float(weights.sum())
    if total <= 0.0:
        return 0.0
    merged = mergeable_matrix(src, dst, cfg).any(axis=1)
    return float(weights[merged].sum()) / total
