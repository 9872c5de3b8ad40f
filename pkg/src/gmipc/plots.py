"""Trial rendering: one SVG per trial with identifiable layers.

Every artist carries a stable ``gid`` (workspace, obstacle-<i>, perceived,
ellipse-<i>, trajectory, start, goal) so files can be inspected — and
tested — by element id.  Output bytes are deterministic: the Agg/SVG
backends are forced, the SVG id hash salt is pinned, and the creation-date
metadata is stripped.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
from matplotlib.patches import Ellipse as MplEllipse
from matplotlib.patches import Polygon as MplPolygon
from matplotlib.patches import Rectangle

from .errors import ArgumentError
from .geometry import GaussianComponent, Point2, SpdMat2, chi2_quantile_2d, ellipse_from_component

__all__ = ["emit_plot"]

matplotlib.rcParams["svg.hashsalt"] = "gmipc"


def _final_components(log) -> tuple:
    for rec in reversed(log.records):
        if rec.components:
            return rec.components
    return ()


def emit_plot(log, path) -> None:
    """Render a trial log to an SVG file at ``path``.

    Layers: workspace frame, obstacle polygons, last-frame perceived points,
    final fitted ellipses, executed trajectory, start/goal markers.
    """
    if not log.records:
        raise ArgumentError("cannot render an empty trial log")
    half = log.workspace_half
    fig, ax = plt.subplots(figsize=(6.0, 6.0))
    ax.set_xlim(-half - 0.5, half + 0.5)
    ax.set_ylim(-half - 0.5, half + 0.5)
    ax.set_aspect("equal")
    ax.set_title(f"{log.scenario_kind} / {log.model} / trial {log.trial_index}")

    frame = Rectangle(
        (-half, -half), 2 * half, 2 * half, fill=False, edgecolor="0.3", linewidth=1.0
    )
    frame.set_gid("workspace")
    ax.add_patch(frame)

    for i, (kind, verts) in enumerate(log.obstacles):
        poly = MplPolygon(verts, closed=True, facecolor="0.75", edgecolor="0.25")
        poly.set_gid(f"obstacle-{i}")
        ax.add_patch(poly)

    if log.final_perceived:
        xs = [p[0] for p in log.final_perceived]
        ys = [p[1] for p in log.final_perceived]
        pts = ax.scatter(xs, ys, s=6, c="tab:red", zorder=3)
        pts.set_gid("perceived")

    tau = chi2_quantile_2d(log.rho)
    for i, (w, mx, my, s11, s12, s22) in enumerate(_final_components(log)):
        comp = GaussianComponent(Point2(mx, my), SpdMat2(s11, s12, s22), min(w, 1.0))
        e = ellipse_from_component(comp, tau)
        patch = MplEllipse(
            (e.center.x, e.center.y),
            width=2 * e.a,
            height=2 * e.b,
            angle=math.degrees(e.theta),
            fill=False,
            edgecolor="tab:blue",
            linewidth=1.2,
            zorder=4,
        )
        patch.set_gid(f"ellipse-{i}")
        ax.add_patch(patch)

    xs = [log.records[0].x] + [r.nx for r in log.records]
    ys = [log.records[0].y] + [r.ny for r in log.records]
    (traj,) = ax.plot(xs, ys, color="tab:green", linewidth=1.5, zorder=5)
    traj.set_gid("trajectory")

    (start,) = ax.plot(*log.start, marker="o", color="black", zorder=6)
    start.set_gid("start")
    (goal,) = ax.plot(*log.goal, marker="*", markersize=12, color="goldenrod", zorder=6)
    goal.set_gid("goal")

    try:
        fig.savefig(path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
