"""Static trajectory figures: history, ground truth and predicted modes over the map."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from causaltraj.data import ROAD_CROSSWALK, Scene  # noqa: E402


def plot_scene(scene: Scene, modes: np.ndarray, probs: np.ndarray, path: str | Path,
               title: str | None = None) -> Path:
    """Write one PNG with map polylines, neighbours, target history, truth and K modes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(8, 3.2), dpi=100)
    for pl in scene.map:
        pts = pl.points
        cross = pts.shape[1] > 2 and np.all(pts[:, 2] == ROAD_CROSSWALK)
        ax.plot(pts[:, 0], pts[:, 1], color="tab:orange" if cross else "0.75",
                lw=3 if cross else 1, zorder=1)
    for nb in scene.neighbors:
        h = nb.history[nb.history_valid]
        ax.plot(h[:, 0], h[:, 1], color="0.4", lw=1, zorder=2)
    hist = scene.target.history[scene.target.history_valid]
    ax.plot(hist[:, 0], hist[:, 1], "o-", color="tab:blue", ms=3, label="history", zorder=3)
    fut = scene.target.future
    ax.plot(fut[:, 0], fut[:, 1], "-", color="k", lw=2, label="ground truth", zorder=4)
    order = np.argsort(-probs, kind="stable")
    for rank, k in enumerate(order):
        ax.plot(modes[k, :, 0], modes[k, :, 1], "--", color="tab:red",
                alpha=0.3 + 0.7 * float(probs[k]), lw=2 if rank == 0 else 1,
                label=f"mode {k} (p={probs[k]:.2f})", zorder=5)
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(title or scene.scene_id)
    ax.legend(loc="upper left", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path
