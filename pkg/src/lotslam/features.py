"""Frame parameterization: contours -> ground points -> line features.

The pipeline turns a semantic raster into the per-frame feature set used by
registration and mapping: border following extracts marker contours, the
LUT projects them to confidence-weighted ground points, chain tangents give
outward contour normals, region growth groups points with consistent
normals, and each cluster is fitted with a line segment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from lotslam.camera import ProjectionLut
from lotslam.core import Line2
from lotslam.sim.render import SemanticRaster


@dataclass(frozen=True)
class FeatureParams:
    min_confidence: float = 0.3
    min_area: float = 0.02  # m^2 convex-hull area below which a contour is noise
    normal_window: int = 3
    angle_threshold_deg: float = 15.0
    min_cluster_size: int = 5


@dataclass(frozen=True)
class GroundPoint:
    """One projected contour point in the vehicle frame."""

    position: np.ndarray
    label: int
    contour_id: int
    seq: int
    normal: np.ndarray | None
    confidence: float


@dataclass
class ContourCloud:
    """Struct-of-arrays ground point set; points of a contour are contiguous
    and kept in chain order. Normals are NaN until estimated."""

    positions: np.ndarray  # (N, 2)
    labels: np.ndarray  # (N,)
    contour_ids: np.ndarray  # (N,)
    seqs: np.ndarray  # (N,)
    normals: np.ndarray  # (N, 2), NaN when unset
    confidences: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def empty(cls) -> "ContourCloud":
        return cls(
            positions=np.zeros((0, 2)),
            labels=np.zeros(0, dtype=np.int32),
            contour_ids=np.zeros(0, dtype=np.int32),
            seqs=np.zeros(0, dtype=np.int32),
            normals=np.zeros((0, 2)),
            confidences=np.zeros(0),
        )

    @classmethod
    def from_ground_points(cls, points: list[GroundPoint]) -> "ContourCloud":
        if not points:
            return cls.empty()
        normals = np.array(
            [p.normal if p.normal is not None else (np.nan, np.nan) for p in points], dtype=float
        )
        return cls(
            positions=np.array([p.position for p in points], dtype=float),
            labels=np.array([p.label for p in points], dtype=np.int32),
            contour_ids=np.array([p.contour_id for p in points], dtype=np.int32),
            seqs=np.array([p.seq for p in points], dtype=np.int32),
            normals=normals,
            confidences=np.array([p.confidence for p in points], dtype=float),
        )

    def as_ground_points(self) -> list[GroundPoint]:
        out = []
        for i in range(len(self)):
            n = self.normals[i]
            out.append(
                GroundPoint(
                    position=self.positions[i].copy(),
                    label=int(self.labels[i]),
                    contour_id=int(self.contour_ids[i]),
                    seq=int(self.seqs[i]),
                    normal=None if np.isnan(n).any() else n.copy(),
                    confidence=float(self.confidences[i]),
                )
            )
        return out

    def contour_slices(self) -> list[tuple[int, slice]]:
        """(contour_id, slice) pairs; relies on contiguous chain-ordered storage."""
        if len(self) == 0:
            return []
        cid = self.contour_ids
        breaks = np.flatnonzero(np.diff(cid)) + 1
        starts = np.concatenate([[0], breaks])
        stops = np.concatenate([breaks, [len(cid)]])
        return [(int(cid[a]), slice(int(a), int(b))) for a, b in zip(starts, stops)]

    def select(self, mask_or_idx) -> "ContourCloud":
        return ContourCloud(
            positions=self.positions[mask_or_idx],
            labels=self.labels[mask_or_idx],
            contour_ids=self.contour_ids[mask_or_idx],
            seqs=self.seqs[mask_or_idx],
            normals=self.normals[mask_or_idx],
            confidences=self.confidences[mask_or_idx],
        )


@dataclass(frozen=True)
class LineFeature:
    """A fitted line segment with its marker class and observation confidence."""

    geometry: Line2
    label: int
    confidence: float
    point_count: int
    contour_id: int = -1


@dataclass
class FrameFeatures:
    points: ContourCloud
    lines: list[LineFeature]
    timestamp: int = 0


@dataclass(frozen=True)
class ContourChain:
    """Ordered outer-border pixels of one same-label blob."""

    contour_id: int
    label: int
    pixels: np.ndarray  # (N, 2) integer (u, v)


class DegenerateClusterError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Border following
# ---------------------------------------------------------------------------

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
# Moore neighborhood in (row, col) = (v, u), clockwise starting west.
_MOORE = ((0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1))
_MOORE_INDEX = {off: k for k, off in enumerate(_MOORE)}


def _trace_outer_border(mask: np.ndarray, start: tuple[int, int]) -> list[tuple[int, int]]:
    """Moore-neighbor border following with Jacob's stopping criterion.

    start must be the first foreground pixel of the blob in row-major order,
    so the cell to its west is background.
    """
    h, w = mask.shape

    def fg(p):
        return 0 <= p[0] < h and 0 <= p[1] < w and mask[p[0], p[1]]

    chain = [start]
    back = 0  # direction index from current pixel toward the backtrack cell (west)
    cur = start
    start_back = back
    max_steps = 4 * int(mask.sum()) + 8
    for _ in range(max_steps):
        nxt = None
        for i in range(1, 9):
            k = (back + i) % 8
            cand = (cur[0] + _MOORE[k][0], cur[1] + _MOORE[k][1])
            if fg(cand):
                prev_bg = (cur[0] + _MOORE[k - 1][0], cur[1] + _MOORE[k - 1][1])
                back = _MOORE_INDEX[(prev_bg[0] - cand[0], prev_bg[1] - cand[1])]
                nxt = cand
                break
        if nxt is None:
            return chain  # isolated pixel
        if nxt == start and back == start_back:
            return chain
        cur = nxt
        chain.append(cur)
    return chain


def extract_contours(raster: SemanticRaster) -> list[ContourChain]:
    """Outer borders of each 4-connected same-label blob, ordered and closed.

    Inner borders (holes) are ignored.
    """
    chains = []
    contour_id = 0
    labels = raster.labels
    for code in sorted(np.unique(labels)):
        if code == 0:
            continue
        blob_ids, n_blobs = ndimage.label(labels == code, structure=_FOUR_CONN)
        slices = ndimage.find_objects(blob_ids)
        for bi in range(1, n_blobs + 1):
            sl = slices[bi - 1]
            sub = blob_ids[sl] == bi
            local = np.argwhere(sub)
            first = local[0]  # argwhere is row-major sorted
            path = _trace_outer_border(sub, (int(first[0]), int(first[1])))
            pix = np.array(path, dtype=np.int64)
            # (v, u) local -> (u, v) global
            uv = np.column_stack([pix[:, 1] + sl[1].start, pix[:, 0] + sl[0].start])
            chains.append(ContourChain(contour_id=contour_id, label=int(code), pixels=uv))
            contour_id += 1
    return chains


# ---------------------------------------------------------------------------
# Projection and filtering
# ---------------------------------------------------------------------------


def project_contours(chains: list[ContourChain], lut: ProjectionLut) -> ContourCloud:
    """Map contour pixels to ground points via the LUT, dropping invalid pixels."""
    parts = []
    for chain in chains:
        u, v = chain.pixels[:, 0], chain.pixels[:, 1]
        ok = lut.valid[v, u]
        if not ok.any():
            continue
        seq = np.flatnonzero(ok)
        parts.append(
            ContourCloud(
                positions=lut.ground[v[ok], u[ok]],
                labels=np.full(ok.sum(), chain.label, dtype=np.int32),
                contour_ids=np.full(ok.sum(), chain.contour_id, dtype=np.int32),
                seqs=seq.astype(np.int32),
                normals=np.full((ok.sum(), 2), np.nan),
                confidences=lut.confidence[v[ok], u[ok]],
            )
        )
    if not parts:
        return ContourCloud.empty()
    return ContourCloud(
        positions=np.vstack([p.positions for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
        contour_ids=np.concatenate([p.contour_ids for p in parts]),
        seqs=np.concatenate([p.seqs for p in parts]),
        normals=np.vstack([p.normals for p in parts]),
        confidences=np.concatenate([p.confidences for p in parts]),
    )


def _convex_hull_area(points: np.ndarray) -> float:
    """Monotone-chain hull area; returns 0 for degenerate point sets."""
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    if len(pts) < 3:
        return 0.0
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = np.array(lower[:-1] + upper[:-1])
    if len(hull) < 3:
        return 0.0
    x, y = hull[:, 0], hull[:, 1]
    return 0.5 * abs(float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)))


def filter_contours(cloud: ContourCloud, min_confidence: float, min_area: float) -> ContourCloud:
    """Drop whole contours with low mean confidence or a tiny convex hull."""
    if len(cloud) == 0:
        return cloud
    keep = np.zeros(len(cloud), dtype=bool)
    for _, sl in cloud.contour_slices():
        if float(cloud.confidences[sl].mean()) < min_confidence:
            continue
        if _convex_hull_area(cloud.positions[sl]) < min_area:
            continue
        keep[sl] = True
    return cloud.select(keep)


# ---------------------------------------------------------------------------
# Contour normals
# ---------------------------------------------------------------------------


def estimate_contour_normals(cloud: ContourCloud, window: int = 3) -> ContourCloud:
    """Outward normals from chain tangents over a +-window neighborhood.

    The tangent at i is the chord between the points window steps ahead and
    behind (cyclic); the normal is the tangent rotated to point away from
    the blob interior, using the chain's orientation (signed area) to fix
    the sign. Contours shorter than 2*window + 1 keep their normals unset.
    """
    normals = cloud.normals.copy()
    for _, sl in cloud.contour_slices():
        pos = cloud.positions[sl]
        n = len(pos)
        if n < 2 * window + 1:
            normals[sl] = np.nan
            continue
        ahead = np.roll(pos, -window, axis=0)
        behind = np.roll(pos, window, axis=0)
        tang = ahead - behind
        tlen = np.linalg.norm(tang, axis=1)
        x, y = pos[:, 0], pos[:, 1]
        area = 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))
        sign = 1.0 if area >= 0 else -1.0
        nrm = np.column_stack([tang[:, 1], -tang[:, 0]]) * sign
        ok = tlen > 1e-12
        nrm[ok] /= tlen[ok, None]
        nrm[~ok] = np.nan
        normals[sl] = nrm
    out = ContourCloud(
        positions=cloud.positions,
        labels=cloud.labels,
        contour_ids=cloud.contour_ids,
        seqs=cloud.seqs,
        normals=normals,
        confidences=cloud.confidences,
    )
    return out


# ---------------------------------------------------------------------------
# Region growth and line fitting
# ---------------------------------------------------------------------------


def cluster_lines(
    cloud: ContourCloud,
    angle_threshold_deg: float = 15.0,
    min_cluster_size: int = 5,
) -> list[np.ndarray]:
    """Grow clusters of consistent normals along each chain.

    A point joins the running cluster while the angle between its normal and
    the cluster's mean normal stays below the threshold; growth starts at
    the chain's sharpest normal change so corners split sides cleanly, and
    never crosses contour boundaries.
    """
    cos_thr = math.cos(math.radians(angle_threshold_deg))
    clusters: list[np.ndarray] = []
    for _, sl in cloud.contour_slices():
        normals = cloud.normals[sl]
        n = len(normals)
        if n == 0 or np.isnan(normals).any(axis=1).all():
            continue
        valid = ~np.isnan(normals).any(axis=1)
        if not valid.all():
            # Degenerate tangents act as breaks; handled below.
            pass
        # Start at the largest normal discontinuity (cyclic).
        prev = np.roll(normals, 1, axis=0)
        dots = np.einsum("ij,ij->i", normals, prev)
        dots = np.where(valid & np.roll(valid, 1), dots, -2.0)
        start = int(np.argmin(dots))
        order = (np.arange(n) + start) % n

        current: list[int] = []
        mean = np.zeros(2)

        def flush():
            if len(current) >= min_cluster_size:
                clusters.append(sl.start + np.array(sorted(current), dtype=np.int64))

        for li in order:
            if not valid[li]:
                flush()
                current = []
                mean = np.zeros(2)
                continue
            nv = normals[li]
            if current:
                m = mean / np.linalg.norm(mean)
                if float(m @ nv) < cos_thr:
                    flush()
                    current = []
                    mean = np.zeros(2)
            current.append(int(li))
            mean = mean + nv
        flush()
    return clusters


def fit_line(cloud: ContourCloud, indices: np.ndarray) -> LineFeature:
    """Least-squares line through a cluster: PCA direction, mean centroid,
    re-orthogonalized mean normal, and extreme-projection endpoints."""
    idx = np.asarray(indices)
    pos = cloud.positions[idx]
    if len(pos) == 0:
        raise DegenerateClusterError("empty cluster")
    centroid = pos.mean(axis=0)
    centered = pos - centroid
    scatter = centered.T @ centered
    evals, evecs = np.linalg.eigh(scatter)
    if evals[-1] <= 1e-18:
        raise DegenerateClusterError("zero scatter: all cluster points coincide")
    direction = evecs[:, -1]
    if direction[0] < 0 or (direction[0] == 0 and direction[1] < 0):
        direction = -direction

    raw_normal = np.nanmean(cloud.normals[idx], axis=0)
    if np.isnan(raw_normal).any():
        raw_normal = np.zeros(2)
    perp = raw_normal - (raw_normal @ direction) * direction
    nlen = float(np.linalg.norm(perp))
    if nlen > 1e-12:
        normal = perp / nlen
    else:
        normal = np.array([-direction[1], direction[0]])
        if raw_normal @ normal < 0:
            normal = -normal

    proj = centered @ direction
    a = centroid + proj.min() * direction
    b = centroid + proj.max() * direction
    geometry = Line2(centroid, direction, normal, a, b)
    return LineFeature(
        geometry=geometry,
        label=int(cloud.labels[idx[0]]),
        confidence=float(np.mean(cloud.confidences[idx])),
        point_count=int(len(idx)),
        contour_id=int(cloud.contour_ids[idx[0]]),
    )


def parameterize_frame(
    raster: SemanticRaster,
    lut: ProjectionLut,
    params: FeatureParams = FeatureParams(),
    timestamp: int = 0,
) -> FrameFeatures:
    """Full raster -> FrameFeatures pipeline (contours, projection, filtering,
    normals, clustering, line fitting)."""
    chains = extract_contours(raster)
    cloud = project_contours(chains, lut)
    cloud = filter_contours(cloud, params.min_confidence, params.min_area)
    cloud = estimate_contour_normals(cloud, params.normal_window)
    clusters = cluster_lines(cloud, params.angle_threshold_deg, params.min_cluster_size)
    lines = []
    for c in clusters:
        try:
            lines.append(fit_line(cloud, c))
        except DegenerateClusterError:
            continue
    return FrameFeatures(points=cloud, lines=lines, timestamp=timestamp)
