"""Image-grid exports for qualitative retrieval results.

One row per metric: the query tile on the left, then its nearest neighbors
with distances, all with optional class-mask overlays.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from anatomy_cbir.slices import CLASS_NAMES, ImageSlice

OVERLAY_COLORS = {"ET": (1.0, 0.2, 0.2), "TC": (0.2, 0.4, 1.0), "ED": (0.2, 1.0, 0.4)}
OVERLAY_ALPHA = 0.35


def tile_array(slc: ImageSlice, overlay: bool = True) -> np.ndarray:
    """RGB render of a slice with translucent class masks."""
    rgb = np.repeat(slc.pixels[..., None].astype(np.float32), 3, axis=2)
    if overlay:
        for name, mask in zip(CLASS_NAMES, slc.abnormal_masks):
            color = np.asarray(OVERLAY_COLORS[name], dtype=np.float32)
            m = (mask > 0)[..., None].astype(np.float32)
            rgb = rgb * (1 - OVERLAY_ALPHA * m) + color * OVERLAY_ALPHA * m
    return np.clip(rgb, 0.0, 1.0)


def export_query_figure(path, query: ImageSlice, neighbors: dict,
                        overlay: bool = True, title: str | None = None) -> Path:
    """Write the grid figure.

    ``neighbors`` maps metric name to a list of (slice, distance) tuples.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metrics = list(neighbors)
    if not metrics:
        raise ValueError("no results to draw")
    n_cols = 1 + max(len(v) for v in neighbors.values())
    fig, axes = plt.subplots(len(metrics), n_cols,
                             figsize=(1.6 * n_cols, 1.9 * len(metrics)),
                             squeeze=False)
    for row, metric in enumerate(metrics):
        ax = axes[row][0]
        ax.imshow(tile_array(query, overlay))
        ax.set_title(f"query\n{query.id}", fontsize=6)
        ax.set_ylabel(metric, fontsize=8)
        ax.set_xticks([]), ax.set_yticks([])
        for col in range(1, n_cols):
            ax = axes[row][col]
            ax.axis("off")
            if col - 1 < len(neighbors[metric]):
                slc, dist = neighbors[metric][col - 1]
                ax.imshow(tile_array(slc, overlay))
                ax.set_title(f"{slc.id}\nd={dist:.3f}", fontsize=6)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def export_reconstruction_figure(path, rows: list, title: str | None = None) -> Path:
    """Write a grid of (input, full reconstruction, pseudo-normal, |difference|)
    rows; each row item is a dict with keys x, x_hat_plus, x_hat_minus, id."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        raise ValueError("no rows to draw")
    cols = ("x", "x_hat_plus", "x_hat_minus", "diff")
    labels = ("input", "reconstruction", "pseudo-normal", "|difference|")
    fig, axes = plt.subplots(len(rows), len(cols),
                             figsize=(1.8 * len(cols), 1.9 * len(rows)),
                             squeeze=False)
    for r, row in enumerate(rows):
        diff = np.abs(row["x_hat_plus"] - row["x_hat_minus"])
        data = {"x": row["x"], "x_hat_plus": row["x_hat_plus"],
                "x_hat_minus": row["x_hat_minus"], "diff": diff}
        for c, key in enumerate(cols):
            ax = axes[r][c]
            ax.imshow(np.asarray(data[key]).squeeze(), cmap="gray", vmin=0, vmax=1)
            ax.set_xticks([]), ax.set_yticks([])
            if r == 0:
                ax.set_title(labels[c], fontsize=8)
            if c == 0:
                ax.set_ylabel(str(row.get("id", r)), fontsize=6)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
