"""Figure rendering for replay, benchmark, and export outputs.

Uses the non-interactive matplotlib backend; every function writes a PNG next
to the delimited output it illustrates and returns the path it wrote.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402


def save_joint_traces(path, times, angles, names=None, title="joint angles") -> str:
    """Plot joint angle trajectories; angles is (n_frames, dof)."""
    angles = np.asarray(angles, dtype=float)
    fig, ax = plt.subplots(figsize=(9, 5))
    for j in range(angles.shape[1]):
        label = names[j] if names is not None else None
        ax.plot(times, angles[:, j], lw=0.9, label=label)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("angle [rad]")
    ax.set_title(title)
    if names is not None and len(names) <= 16:
        ax.legend(fontsize=6, ncol=4, loc="upper left")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def save_distance_traces(path, times, distances_mm, labels,
                         threshold_mm=None, title="fingertip distances") -> str:
    """Plot named distance traces in millimeters with an optional threshold."""
    fig, ax = plt.subplots(figsize=(9, 5))
    for row, label in zip(np.asarray(distances_mm, dtype=float).T, labels):
        ax.plot(times, row, lw=1.2, label=label)
    if threshold_mm is not None:
        ax.axhline(threshold_mm, color="k", ls="--", lw=0.8,
                   label=f"{threshold_mm:g} mm")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("distance [mm]")
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def save_timing_histogram(path, values_ms, budget_ms=None, title="solve time") -> str:
    """Histogram of per-frame times with median/p95 markers."""
    values = np.asarray(values_ms, dtype=float)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.hist(values, bins=40, color="#4878cf", alpha=0.85)
    for q, color in ((50, "g"), (95, "r")):
        v = float(np.percentile(values, q))
        ax.axvline(v, color=color, ls="-", lw=1.0, label=f"p{q} = {v:.2f} ms")
    if budget_ms is not None:
        ax.axvline(budget_ms, color="k", ls="--", lw=1.0,
                   label=f"budget {budget_ms:g} ms")
    ax.set_xlabel("time [ms]")
    ax.set_ylabel("frames")
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def save_tip_scene(path, tip_tracks, title="fingertip paths") -> str:
    """3D view of fingertip trajectories; tip_tracks maps name -> (n, 3)."""
    fig = plt.figure(figsize=(7, 6))
    ax = fig.add_subplot(projection="3d")
    for name, track in tip_tracks.items():
        track = np.asarray(track, dtype=float)
        ax.plot(track[:, 0], track[:, 1], track[:, 2], lw=1.0, label=name)
        ax.scatter(*track[-1], s=14)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_zlabel("z [m]")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)
