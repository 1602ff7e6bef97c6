"""Stick-figure filmstrip of a motion in its heading-aligned frame."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .motion_io import MotionSequence


def joint_positions(motion: MotionSequence) -> np.ndarray:
    """``(N, J, 3)`` positions with the root placed at its stored height."""
    topo = motion.topology
    rel = motion.positions()
    out = np.zeros((motion.n_frames, topo.n_joints, 3), dtype=np.float32)
    others = [j for j in range(topo.n_joints) if j != topo.root]
    out[:, others] = rel
    out[:, topo.root, 1] = motion.blocks[topo.root][:, 0]
    return out


def render_filmstrip(motion: MotionSequence, path: str | Path, n_panels: int = 6, title: str | None = None) -> None:
    """Front view (x right, y up) of ``n_panels`` evenly spaced frames."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pos = joint_positions(motion)
    parent = motion.topology.parent
    frames = np.linspace(0, motion.n_frames - 1, n_panels).round().astype(int)
    fig, axes = plt.subplots(1, n_panels, figsize=(1.8 * n_panels, 3.2), squeeze=False)
    lo, hi = pos[..., :2].min(), pos[..., :2].max()
    for ax, f in zip(axes[0], frames):
        for j, p in enumerate(parent):
            if p >= 0:
                ax.plot(pos[f, [p, j], 0], pos[f, [p, j], 1], color="k", lw=1.5)
        ax.set_xlim(lo - 0.1, hi + 0.1)
        ax.set_ylim(min(lo, 0.0) - 0.1, hi + 0.1)
        ax.set_aspect("equal")
        ax.set_title(f"frame {f}", fontsize=8)
        ax.axis("off")
    if title:
        fig.suptitle(title, fontsize=9)
    fig.savefig(path, dpi=100)
    plt.close(fig)
