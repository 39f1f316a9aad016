"""Static map and trajectory renders (deterministic SVG via matplotlib)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.collections import LineCollection

from lotslam.core import Pose2
from lotslam.mapping import VectorMap

matplotlib.rcParams["svg.hashsalt"] = "lotslam"

_TRAJ_COLORS = ("tab:orange", "tab:green", "tab:red", "tab:purple")


def render_map_figure(
    vmap: VectorMap,
    trajectories: list[tuple[str, list[Pose2]]] | None = None,
    out_path=None,
):
    """Draw map batches as segments colored by stability, trajectories on top.

    Output bytes are deterministic for identical inputs (fixed hash salt, no
    date metadata).
    """
    fig, ax = plt.subplots(figsize=(9, 7))
    if vmap.batches:
        segs = np.array([[[b.ex1, b.ey1], [b.ex2, b.ey2]] for b in vmap.batches])
        probs = np.array([b.probability for b in vmap.batches])
        lc = LineCollection(segs, cmap="viridis", linewidths=1.4)
        lc.set_array(probs)
        lc.set_clim(0.0, 1.0)
        ax.add_collection(lc)
        fig.colorbar(lc, ax=ax, label="batch stability $\\sigma$(log-odds)")
        ax.autoscale()
    for k, (name, poses) in enumerate(trajectories or []):
        if not poses:
            continue
        xy = np.array([[p.x, p.y] for p in poses])
        style = "--" if name.lower().startswith("gt") else "-"
        ax.plot(xy[:, 0], xy[:, 1], style, color=_TRAJ_COLORS[k % len(_TRAJ_COLORS)], lw=1.0, label=name)
    if trajectories:
        ax.legend(loc="upper right", fontsize=8)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal")
    ax.set_title(f"vector map: {len(vmap.batches)} batches, {len(vmap.keyframe_poses)} keyframes")
    if out_path is not None:
        fig.savefig(out_path, format="svg", metadata={"Date": None})
        plt.close(fig)
        return None
    return fig
