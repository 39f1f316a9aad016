"""Batch Levenberg-Marquardt optimization of planar pose graphs.

Factors constrain absolute poses (prior, localization) or relative poses
between nodes (odometry, loop). Residuals are local-frame pose differences;
the solver is a dense LM loop, which is plenty for desk-scale graphs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from lotslam.core import Pose2, se2_boxminus, se2_compose, se2_inverse

FACTOR_KINDS = ("odometry", "prior", "loop", "localization")

_J90 = np.array([[0.0, -1.0], [1.0, 0.0]])


class GraphStructureError(ValueError):
    pass


@dataclass(frozen=True)
class Factor:
    kind: str
    i: int
    j: int | None  # None for unary factors
    measurement: Pose2
    information: np.ndarray

    def __post_init__(self):
        if self.kind not in FACTOR_KINDS:
            raise ValueError(f"unknown factor kind: {self.kind!r}")
        info = np.asarray(self.information, dtype=float).reshape(3, 3)
        if not np.allclose(info, info.T, atol=1e-9):
            raise GraphStructureError("information matrix is not symmetric")
        if np.linalg.eigvalsh(info).min() <= 0:
            raise GraphStructureError("information matrix is not positive definite")
        object.__setattr__(self, "information", info)

    @property
    def is_unary(self) -> bool:
        return self.j is None


@dataclass
class PoseGraph:
    nodes: dict[int, Pose2] = field(default_factory=dict)
    factors: list[Factor] = field(default_factory=list)
    fixed: set[int] = field(default_factory=set)

    def add_node(self, node_id: int, pose: Pose2) -> None:
        self.nodes[node_id] = pose

    def add_factor(self, factor: Factor) -> None:
        if factor.i not in self.nodes or (factor.j is not None and factor.j not in self.nodes):
            raise GraphStructureError("factor references a missing node")
        self.factors.append(factor)


def _check_connected(graph: PoseGraph) -> None:
    ids = sorted(graph.nodes)
    if len(ids) <= 1:
        return
    parent = {i: i for i in ids}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for f in graph.factors:
        if f.j is not None:
            ra, rb = find(f.i), find(f.j)
            if ra != rb:
                parent[ra] = rb
    roots = {find(i) for i in ids}
    if len(roots) > 1:
        raise GraphStructureError(f"pose graph is disconnected ({len(roots)} components)")


def _residual_and_jacobians(f: Factor, nodes: dict[int, Pose2]):
    """Residual r = boxminus(predicted, measured) and Jacobians for right
    perturbations X <- X o exp(delta)."""
    z_inv = se2_inverse(f.measurement)
    if f.is_unary:
        p = nodes[f.i]
        e = se2_compose(z_inv, p)
        r = np.array([e.x, e.y, e.theta])
        ji = np.zeros((3, 3))
        ji[:2, :2] = e.rotation
        ji[2, 2] = 1.0
        return r, ((f.i, ji),)
    xi, xj = nodes[f.i], nodes[f.j]
    pred = se2_compose(se2_inverse(xi), xj)
    e = se2_compose(z_inv, pred)
    r = np.array([e.x, e.y, e.theta])
    rz_t = f.measurement.rotation.T
    ji = np.zeros((3, 3))
    ji[:2, :2] = -rz_t
    ji[:2, 2] = -rz_t @ (_J90 @ pred.translation)
    ji[2, 2] = -1.0
    jj = np.zeros((3, 3))
    jj[:2, :2] = e.rotation
    jj[2, 2] = 1.0
    return r, ((f.i, ji), (f.j, jj))


def _total_cost(graph: PoseGraph, nodes: dict[int, Pose2]) -> float:
    cost = 0.0
    for f in graph.factors:
        r, _ = _residual_and_jacobians(f, nodes)
        cost += float(r @ f.information @ r)
    return cost


def optimize_pose_graph(
    graph: PoseGraph,
    max_iterations: int = 100,
    rel_cost_tol: float = 1e-9,
) -> dict[int, Pose2]:
    """LM on the sum of factor residual costs; returns optimized node poses.

    Requires a connected graph with at least one absolute (prior or
    localization) factor; fixed nodes are held constant.
    """
    if not graph.nodes:
        return {}
    _check_connected(graph)
    has_anchor = any(f.is_unary for f in graph.factors) or bool(graph.fixed)
    if not has_anchor:
        raise GraphStructureError("pose graph has no prior factor or fixed node")

    free_ids = [i for i in sorted(graph.nodes) if i not in graph.fixed]
    col = {nid: 3 * k for k, nid in enumerate(free_ids)}
    nodes = dict(graph.nodes)
    if not free_ids:
        return nodes

    n = 3 * len(free_ids)
    lam = 1e-6
    cost = _total_cost(graph, nodes)

    for _ in range(max_iterations):
        H = np.zeros((n, n))
        b = np.zeros(n)
        for f in graph.factors:
            r, jacs = _residual_and_jacobians(f, nodes)
            info = f.information
            jacs = [(nid, J) for nid, J in jacs if nid in col]
            for nid_a, Ja in jacs:
                ca = col[nid_a]
                b[ca : ca + 3] += Ja.T @ info @ r
                for nid_b, Jb in jacs:
                    cb = col[nid_b]
                    H[ca : ca + 3, cb : cb + 3] += Ja.T @ info @ Jb

        improved = False
        for _trial in range(8):
            damped = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                delta = np.linalg.solve(damped, -b)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            candidate = dict(nodes)
            for nid in free_ids:
                c = col[nid]
                candidate[nid] = se2_compose(nodes[nid], Pose2(delta[c], delta[c + 1], delta[c + 2]))
            new_cost = _total_cost(graph, candidate)
            if new_cost <= cost:
                improved = True
                rel_change = (cost - new_cost) / max(cost, 1e-300)
                nodes = candidate
                cost = new_cost
                lam = max(lam / 10.0, 1e-12)
                break
            lam *= 10.0
        if not improved:
            break
        if rel_change < rel_cost_tol:
            break
    return nodes


def diagonal_information(sigma_x: float, sigma_y: float, sigma_theta: float) -> np.ndarray:
    """Information matrix from per-axis standard deviations, clipped for conditioning."""
    s = np.array([sigma_x, sigma_y, sigma_theta], dtype=float)
    s = np.maximum(s, 1e-6)
    return np.diag(np.minimum(1.0 / s**2, 1e12))
