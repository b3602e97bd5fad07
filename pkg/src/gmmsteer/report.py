"""Artifact emission for the CLI: JSON/CSV outputs and rendered figures.

Files are written atomically (temp + rename).  Figures are rendered with the
Agg backend next to the delimited outputs: density heatmaps of the initial,
terminal and desired mixtures, sampled trajectories, and the iteration trace
when a block-coordinate run produced one.
"""

import csv
import json
import os
import tempfile

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .gaussians import pdf  # noqa: E402

__all__ = [
    "write_json",
    "write_csv",
    "density_grid",
    "write_density_csv",
    "write_trajectories_csv",
    "render_figures",
]


def _atomic(path, write_fn, mode="w"):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, mode, newline="" if "b" not in mode else None) as fh:
            write_fn(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    return obj


def write_json(path, payload):
    payload = _jsonable(payload)
    _atomic(path, lambda fh: json.dump(payload, fh, indent=2, sort_keys=True))


def write_csv(path, header, rows):
    def writer(fh):
        out = csv.writer(fh)
        out.writerow(header)
        out.writerows(rows)

    _atomic(path, writer)


def density_grid(gmm, points_per_axis=120, spread=3.5):
    """Plot-ready density samples of a 1D or 2D mixture."""
    means = gmm.means()
    sigs = np.stack([np.sqrt(np.diag(c.cov)) for c in gmm.components])
    lo = (means - spread * sigs).min(axis=0)
    hi = (means + spread * sigs).max(axis=0)
    if gmm.dim == 1:
        xs = np.linspace(lo[0], hi[0], points_per_axis).reshape(-1, 1)
        return xs, pdf(gmm, xs)
    if gmm.dim == 2:
        gx, gy = np.meshgrid(
            np.linspace(lo[0], hi[0], points_per_axis),
            np.linspace(lo[1], hi[1], points_per_axis),
            indexing="ij",
        )
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        return pts, pdf(gmm, pts)
    # higher dimensions: report the positional plane (first two coordinates)
    marg = _position_marginal(gmm)
    return density_grid(marg, points_per_axis, spread)


def _position_marginal(gmm):
    from .gaussians import Gaussian, Gmm

    comps = [Gaussian(c.mean[:2], c.cov[:2, :2]) for c in gmm.components]
    return Gmm(gmm.weights, comps)


def write_density_csv(path, gmm, points_per_axis=120):
    pts, vals = density_grid(gmm, points_per_axis)
    if pts.shape[1] == 1:
        write_csv(path, ["x", "pdf"], [[float(x), float(v)] for (x,), v in zip(pts, vals)])
    else:
        write_csv(
            path,
            ["x", "y", "pdf"],
            [[float(x), float(y), float(v)] for (x, y), v in zip(pts, vals)],
        )


def write_trajectories_csv(path, states):
    count, steps, n = states.shape
    header = ["sample", "k"] + [f"x{i}" for i in range(n)]
    rows = [
        [s, k] + [float(v) for v in states[s, k]]
        for s in range(count)
        for k in range(steps)
    ]
    write_csv(path, header, rows)


def _density_axes(ax, gmm, title):
    pts, vals = density_grid(gmm)
    if pts.shape[1] == 1:
        ax.plot(pts[:, 0], vals)
        ax.set_xlabel("x")
        ax.set_ylabel("pdf")
    else:
        side = int(np.sqrt(pts.shape[0]))
        ax.contourf(
            pts[:, 0].reshape(side, side),
            pts[:, 1].reshape(side, side),
            vals.reshape(side, side),
            levels=30,
            cmap="viridis",
        )
        ax.set_xlabel("x")
        ax.set_ylabel("y")
        ax.set_aspect("equal", adjustable="datalim")
    ax.set_title(title)


def render_figures(outdir, initial=None, terminal=None, desired=None, states=None,
                   trace=None, max_traj=200):
    """Render the report figures next to the delimited outputs."""
    os.makedirs(outdir, exist_ok=True)
    written = []
    panels = [(name, g) for name, g in
              (("initial", initial), ("terminal", terminal), ("desired", desired))
              if g is not None]
    if panels:
        fig, axes = plt.subplots(1, len(panels), figsize=(4.2 * len(panels), 4.0))
        axes = np.atleast_1d(axes)
        for ax, (name, g) in zip(axes, panels):
            _density_axes(ax, g, name)
        fig.tight_layout()
        path = os.path.join(outdir, "densities.png")
        fig.savefig(path, dpi=130)
        plt.close(fig)
        written.append(path)
    if states is not None and states.shape[0] > 0:
        fig, ax = plt.subplots(figsize=(5.0, 4.5))
        shown = states[:max_traj]
        if states.shape[2] == 1:
            for track in shown:
                ax.plot(np.arange(track.shape[0]), track[:, 0], alpha=0.25, lw=0.8)
            ax.set_xlabel("k")
            ax.set_ylabel("x")
        else:
            for track in shown:
                ax.plot(track[:, 0], track[:, 1], alpha=0.25, lw=0.8)
            ax.scatter(shown[:, 0, 0], shown[:, 0, 1], s=6, c="tab:blue", label="start")
            ax.scatter(shown[:, -1, 0], shown[:, -1, 1], s=6, c="tab:red", label="end")
            ax.legend(loc="best", fontsize=8)
            ax.set_xlabel("x")
            ax.set_ylabel("y")
            ax.set_aspect("equal", adjustable="datalim")
        ax.set_title("sampled trajectories")
        fig.tight_layout()
        path = os.path.join(outdir, "trajectories.png")
        fig.savefig(path, dpi=130)
        plt.close(fig)
        written.append(path)
    if trace:
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        ax.plot(np.arange(1, len(trace) + 1), trace, marker="o", ms=3)
        ax.set_xlabel("iteration")
        ax.set_ylabel("objective")
        ax.set_title("block-coordinate descent trace")
        fig.tight_layout()
        path = os.path.join(outdir, "bcd_trace.png")
        fig.savefig(path, dpi=130)
        plt.close(fig)
        written.append(path)
    return written
