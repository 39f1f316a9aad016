"""Parking-lot scenes: labeled ground polygons with deterministic generation.

A scene is a flat list of simple, counterclockwise marker polygons. The
generator lays out rows of parking slots (0.15 m painted lines, 2.5 x 5.5 m
slots) separated by driving aisles, with lane dashes, guide arrows, and a
stop line at the entrance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from lotslam.labels import label_code

SCENE_VERSION = 1

SLOT_WIDTH = 2.5
SLOT_DEPTH = 5.5
LINE_WIDTH = 0.15
# Compact drive aisle: slot-line tips stay within the confident part of the
# surround view from the aisle centerline.
AISLE_WIDTH = 5.5
EXTENT_MARGIN = 8.0


def polygon_area(vertices: np.ndarray) -> float:
    """Signed shoelace area; positive for counterclockwise rings."""
    v = np.asarray(vertices, dtype=float)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _segments_intersect(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(p3, p4, p1)
    d2 = orient(p3, p4, p2)
    d3 = orient(p1, p2, p3)
    d4 = orient(p1, p2, p4)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


def _is_simple(vertices: np.ndarray) -> bool:
    n = len(vertices)
    for i in range(n):
        a1, a2 = vertices[i], vertices[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            if _segments_intersect(a1, a2, vertices[j], vertices[(j + 1) % n]):
                return False
    return True


@dataclass(frozen=True)
class MarkerPolygon:
    """One painted marker: a simple CCW polygon with a class label."""

    id: int
    label: str
    vertices: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 2)
        if len(v) < 3:
            raise ValueError("polygon needs at least 3 vertices")
        if polygon_area(v) < 0:
            v = v[::-1].copy()
        if polygon_area(v) <= 0:
            raise ValueError("degenerate polygon (zero area)")
        if not _is_simple(v):
            raise ValueError(f"polygon {self.id} is self-intersecting")
        label_code(self.label)  # validates the label name
        object.__setattr__(self, "vertices", v)

    @property
    def label_code(self) -> int:
        return label_code(self.label)

    def translated(self, delta) -> "MarkerPolygon":
        d = np.asarray(delta, dtype=float)
        return MarkerPolygon(self.id, self.label, self.vertices + d)


@dataclass(frozen=True)
class Scene:
    polygons: tuple[MarkerPolygon, ...]
    extent: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax

    def __post_init__(self):
        ids = [p.id for p in self.polygons]
        if len(ids) != len(set(ids)):
            raise ValueError("polygon ids are not unique")
        object.__setattr__(self, "polygons", tuple(self.polygons))

    def polygon_by_id(self, pid: int) -> MarkerPolygon:
        for p in self.polygons:
            if p.id == pid:
                return p
        raise KeyError(f"no polygon with id {pid}")

    def bounds_of_polygons(self):
        if not self.polygons:
            return (0.0, 0.0, 0.0, 0.0)
        allv = np.vstack([p.vertices for p in self.polygons])
        return (
            float(allv[:, 0].min()),
            float(allv[:, 1].min()),
            float(allv[:, 0].max()),
            float(allv[:, 1].max()),
        )


def _extent_for(polygons, margin=EXTENT_MARGIN):
    if not polygons:
        return (-margin, -margin, margin, margin)
    allv = np.vstack([p.vertices for p in polygons])
    return (
        float(allv[:, 0].min() - margin),
        float(allv[:, 1].min() - margin),
        float(allv[:, 0].max() + margin),
        float(allv[:, 1].max() + margin),
    )


def _rect(x0, y0, x1, y1) -> np.ndarray:
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float)


def _arrow_vertices(center, heading: float) -> np.ndarray:
    # 2.0 m long guide arrow: shaft 0.3 m wide, head 0.8 m wide.
    local = np.array(
        [
            [-1.0, -0.15],
            [0.3, -0.15],
            [0.3, -0.4],
            [1.0, 0.0],
            [0.3, 0.4],
            [0.3, 0.15],
            [-1.0, 0.15],
        ]
    )
    c, s = np.cos(heading), np.sin(heading)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.asarray(center, dtype=float)


def generate_lot(rows: int, slots_per_row: int, seed: int = 0) -> Scene:
    """Deterministic parking-lot scene.

    Rows alternate opening direction so that consecutive pairs face a shared
    aisle; each opening row contributes guide arrows to its aisle, lane
    dashes run along aisle centers, and a stop line sits at the entrance of
    the first aisle. Same seed, same scene.
    """
    if rows < 1 or slots_per_row < 1:
        raise ValueError("rows and slots_per_row must be >= 1")
    rng = np.random.default_rng(seed)
    hw = LINE_WIDTH / 2.0
    row_span = slots_per_row * SLOT_WIDTH
    polys = []
    pid = 0

    def add(label, verts):
        nonlocal pid
        polys.append(MarkerPolygon(pid, label, verts))
        pid += 1

    # Row vertical layout: row 0 opens up into aisle 0, row 1 opens down into
    # aisle 0, row 2 opens up into aisle 1 (back-to-back with row 1), ...
    y = 0.0
    aisle_centers = []
    row_geoms = []  # (y_bottom, opens_up)
    for r in range(rows):
        row_geoms.append((y, r % 2 == 0))
        y += SLOT_DEPTH
        if r % 2 == 0:
            aisle_centers.append(y + AISLE_WIDTH / 2.0)
            y += AISLE_WIDTH

    for y0, opens_up in row_geoms:
        y1 = y0 + SLOT_DEPTH
        for i in range(slots_per_row + 1):
            x = i * SLOT_WIDTH
            add("parking_line", _rect(x - hw, y0, x + hw, y1))
        if opens_up:
            add("parking_line", _rect(-hw, y0 - hw, row_span + hw, y0 + hw))
        else:
            add("parking_line", _rect(-hw, y1 - hw, row_span + hw, y1 + hw))

    for yc in aisle_centers:
        # Dashed lane line along the aisle center.
        x = 0.5
        while x + 1.5 <= row_span - 0.5:
            add("lane_line", _rect(x, yc - 0.05, x + 1.5, yc + 0.05))
            x += 4.0
        # Guide arrows every fourth slot, heading jittered by the seed.
        k = 2
        while k < slots_per_row:
            cx = k * SLOT_WIDTH + SLOT_WIDTH / 2.0
            heading = 0.0 if rng.random() < 0.5 else np.pi
            cy = yc + (1.6 if rng.random() < 0.5 else -1.6)
            add("arrow", _arrow_vertices((cx, cy), heading))
            k += 4

    if aisle_centers:
        yc = aisle_centers[0]
        add("stop_line", _rect(-2.2, yc - AISLE_WIDTH / 2.0 + 0.5, -1.9, yc + AISLE_WIDTH / 2.0 - 0.5))

    return Scene(polygons=tuple(polys), extent=_extent_for(polys))


@dataclass(frozen=True)
class RemovePolygon:
    id: int


@dataclass(frozen=True)
class AddPolygon:
    label: str
    vertices: np.ndarray
    id: int | None = None


@dataclass(frozen=True)
class TranslatePolygon:
    id: int
    delta: tuple[float, float]


def perturb_scene(scene: Scene, ops) -> Scene:
    """Apply remove/add/translate ops, returning a new scene.

    Unknown polygon ids raise KeyError; the input scene is never mutated.
    The extent only grows, so an empty op list returns an identical scene.
    """
    polys = {p.id: p for p in scene.polygons}
    order = [p.id for p in scene.polygons]
    next_id = max(order, default=-1) + 1
    for op in ops:
        if isinstance(op, RemovePolygon):
            if op.id not in polys:
                raise KeyError(f"no polygon with id {op.id}")
            del polys[op.id]
            order.remove(op.id)
        elif isinstance(op, AddPolygon):
            pid = op.id if op.id is not None else next_id
            if pid in polys:
                raise KeyError(f"polygon id {pid} already exists")
            next_id = max(next_id, pid + 1)
            polys[pid] = MarkerPolygon(pid, op.label, op.vertices)
            order.append(pid)
        elif isinstance(op, TranslatePolygon):
            if op.id not in polys:
                raise KeyError(f"no polygon with id {op.id}")
            polys[op.id] = polys[op.id].translated(op.delta)
        else:
            raise TypeError(f"unknown scene op: {op!r}")
    new_polys = tuple(polys[i] for i in order)
    grown = _extent_for(new_polys)
    extent = (
        min(scene.extent[0], grown[0]),
        min(scene.extent[1], grown[1]),
        max(scene.extent[2], grown[2]),
        max(scene.extent[3], grown[3]),
    )
    return Scene(polygons=new_polys, extent=extent)


# ---------------------------------------------------------------------------
# Point classification (used by the raster renderer)
# ---------------------------------------------------------------------------


def points_in_polygon(points: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Even-odd point-in-polygon test with boundary counted as inside."""
    pts = np.asarray(points, dtype=float)
    v = np.asarray(vertices, dtype=float)
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    on_edge = np.zeros(len(pts), dtype=bool)
    xs, ys = v[:, 0], v[:, 1]
    xn, yn = np.roll(xs, -1), np.roll(ys, -1)
    for k in range(len(v)):
        x1, y1, x2, y2 = xs[k], ys[k], xn[k], yn[k]
        cross_mask = (y1 > y) != (y2 > y)
        if y2 != y1:
            xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            inside ^= cross_mask & (x < xint)
        ex, ey = x2 - x1, y2 - y1
        seg_len2 = ex * ex + ey * ey
        if seg_len2 == 0.0:
            continue
        t = ((x - x1) * ex + (y - y1) * ey) / seg_len2
        t = np.clip(t, 0.0, 1.0)
        d2 = (x - (x1 + t * ex)) ** 2 + (y - (y1 + t * ey)) ** 2
        on_edge |= d2 <= 1e-18
    return inside | on_edge


def classify_points(scene: Scene, points: np.ndarray, cell: float = 0.25) -> np.ndarray:
    """Label codes for ground points; later polygons win where markers overlap.

    Points are binned into a uniform grid once so each polygon only tests
    the points inside its bounding box.
    """
    pts = np.asarray(points, dtype=float)
    labels = np.zeros(len(pts), dtype=np.uint8)
    if len(pts) == 0 or not scene.polygons:
        return labels
    xmin = pts[:, 0].min() - 1e-9
    ymin = pts[:, 1].min() - 1e-9
    cxi = np.floor((pts[:, 0] - xmin) / cell).astype(np.int64)
    cyi = np.floor((pts[:, 1] - ymin) / cell).astype(np.int64)
    ncx = int(cxi.max()) + 1
    ncy = int(cyi.max()) + 1
    key = cyi * ncx + cxi
    order = np.argsort(key, kind="stable")
    skey = key[order]

    for poly in scene.polygons:
        v = poly.vertices
        bx0, by0 = v.min(axis=0)
        bx1, by1 = v.max(axis=0)
        ix0 = int(np.floor((bx0 - xmin) / cell))
        ix1 = int(np.floor((bx1 - xmin) / cell))
        iy0 = int(np.floor((by0 - ymin) / cell))
        iy1 = int(np.floor((by1 - ymin) / cell))
        if ix1 < 0 or iy1 < 0 or ix0 >= ncx or iy0 >= ncy:
            continue
        ix0, iy0 = max(ix0, 0), max(iy0, 0)
        ix1, iy1 = min(ix1, ncx - 1), min(iy1, ncy - 1)
        chunks = []
        for iy in range(iy0, iy1 + 1):
            lo = np.searchsorted(skey, iy * ncx + ix0, "left")
            hi = np.searchsorted(skey, iy * ncx + ix1, "right")
            if hi > lo:
                chunks.append(order[lo:hi])
        if not chunks:
            continue
        cand = np.concatenate(chunks)
        hit = points_in_polygon(pts[cand], v)
        labels[cand[hit]] = poly.label_code
    return labels


# ---------------------------------------------------------------------------
# Serialization (versioned JSON, floats at 17 significant digits)
# ---------------------------------------------------------------------------


def dump_json_17g(obj) -> str:
    """JSON text with every float formatted at 17 significant digits."""

    def emit(o):
        if isinstance(o, bool):
            return "true" if o else "false"
        if isinstance(o, float):
            if not np.isfinite(o):
                raise ValueError("non-finite float in JSON payload")
            return format(o, ".17g")
        if isinstance(o, (int, np.integer)):
            return str(int(o))
        if isinstance(o, str):
            return json.dumps(o)
        if isinstance(o, np.floating):
            return emit(float(o))
        if isinstance(o, np.ndarray):
            return emit(o.tolist())
        if isinstance(o, (list, tuple)):
            return "[" + ",".join(emit(e) for e in o) + "]"
        if isinstance(o, dict):
            items = ((json.dumps(str(k)), emit(v)) for k, v in o.items())
            return "{" + ",".join(f"{k}:{v}" for k, v in items) + "}"
        if o is None:
            return "null"
        raise TypeError(f"cannot serialize {type(o)!r}")

    return emit(obj)


def scene_to_dict(scene: Scene) -> dict:
    return {
        "version": SCENE_VERSION,
        "extent": list(scene.extent),
        "polygons": [
            {"id": p.id, "label": p.label, "vertices": p.vertices.tolist()}
            for p in scene.polygons
        ],
    }


def scene_from_dict(data: dict) -> Scene:
    if data.get("version") != SCENE_VERSION:
        raise ValueError(f"unsupported scene version: {data.get('version')!r}")
    polys = tuple(
        MarkerPolygon(int(p["id"]), p["label"], np.array(p["vertices"], dtype=float))
        for p in data["polygons"]
    )
    return Scene(polygons=polys, extent=tuple(float(v) for v in data["extent"]))


def save_scene(scene: Scene, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_json_17g(scene_to_dict(scene)))


def load_scene(path) -> Scene:
    with open(path, "r", encoding="utf-8") as fh:
        return scene_from_dict(json.load(fh))
