"""Figures for CLI reports (only used with ``--figures``)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.color": "#ddd",
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": "small",
    "savefig.bbox": "tight",
}


def _save(fig, path: str | Path) -> str:
    fig.savefig(path)
    plt.close(fig)
    return str(path)


def trajectory_figure(traj, setup, path, K: float | None = None) -> str:
    """Projection on the plane of largest spread, with centres and the K-circle."""
    with plt.rc_context(STYLE):
        x = traj.x
        # principal plane of the orbit
        _, _, vt = np.linalg.svd(x - x.mean(axis=0), full_matrices=False)
        e1, e2 = vt[0], vt[1]
        fig, ax = plt.subplots()
        ax.plot(x @ e1, x @ e2, lw=1.0, color="C0", label="trajectory")
        c = setup.centres
        ax.scatter(c @ e1, c @ e2, s=20 * setup.masses / setup.masses.max(), color="k", zorder=3, label="centres")
        if K is not None:
            th = np.linspace(0, 2 * np.pi, 200)
            ax.plot(K * np.cos(th), K * np.sin(th), ls="--", lw=0.8, color="0.5", label="K")
        ax.set_aspect("equal")
        ax.set_xlabel("e1")
        ax.set_ylabel("e2")
        ax.legend(loc="best")
        return _save(fig, path)


def collision_angle_figure(rows: list[dict], path) -> str:
    with plt.rc_context(STYLE):
        d = np.array([r["d"] for r in rows])
        fig, ax = plt.subplots()
        dd = np.linspace(0, max(1.0, d.max()), 100)
        ax.plot(dd, 2 * np.pi * np.sqrt(1 + dd), color="0.4", lw=1, label="2 pi sqrt(1+d)")
        ax.plot(d, [r["measured"] for r in rows], "o", color="C1", label="measured")
        ax.set_xlabel("d")
        ax.set_ylabel("swept angle")
        ax.legend()
        return _save(fig, path)


def scatter_figure(run, path) -> str:
    """Translated solutions over the R grid plus direction errors."""
    with plt.rc_context({**STYLE, "figure.figsize": (10.0, 4.0)}):
        fig, (a0, a1) = plt.subplots(1, 2)
        for k, rec in enumerate(run.records):
            x = rec.trajectory.x
            a0.plot(x[:, 0], x[:, 1], lw=0.8, color=plt.cm.viridis(k / max(1, len(run.records) - 1)), label=f"R={rec.R:.3g}")
        c = run.setup.centres
        a0.scatter(c[:, 0], c[:, 1], color="k", s=12, zorder=3)
        a0.set_aspect("equal")
        a0.set_xlabel("x1")
        a0.set_ylabel("x2")
        a0.legend()
        R = run.R_grid
        a1.loglog(R, [r.direction_errors[0] for r in run.records], "o-", label="incoming")
        a1.loglog(R, [r.direction_errors[1] for r in run.records], "s-", label="outgoing")
        a1.set_xlabel("R")
        a1.set_ylabel("direction error")
        a1.legend()
        return _save(fig, path)


def beta_sweep_figure(betas, dists, path) -> str:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        b = list(betas) + ["final"] * (len(dists) - len(betas))
        ax.plot(range(len(dists)), dists, "o-")
        ax.set_xticks(range(len(dists)), [str(v) for v in b])
        ax.set_xlabel("beta")
        ax.set_ylabel("min centre distance")
        return _save(fig, path)
