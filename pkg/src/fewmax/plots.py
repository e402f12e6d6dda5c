"""Image-file plots for evaluation reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _displayable(tensor):
    """H x W x C sample as something imshow understands."""
    t = np.asarray(tensor, dtype=np.float64)
    if t.shape[-1] == 2:
        img = np.hypot(t[..., 0], t[..., 1])
    elif t.shape[-1] == 3:
        img = t
    else:
        img = t[..., 0]
    lo, hi = float(img.min()), float(img.max())
    return (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)


def landscape_plot(grid, path):
    """Filled contour of a loss-landscape slice."""
    coords = grid.coords
    values = np.where(np.isfinite(grid.grid), grid.grid, np.nan)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    cs = ax.contourf(coords, coords, values.T, levels=20, cmap="viridis")
    fig.colorbar(cs, ax=ax, label="loss")
    ax.plot([0], [0], "r+", markersize=10)
    ax.set_xlabel("alpha")
    ax.set_ylabel("beta")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def retrieval_montage(rows, path):
    """One row per query: the query image followed by its neighbors.

    ``rows`` is a list of ``(query_tensor, [(neighbor_tensor, distance), ...])``.
    """
    k = max(len(nb) for _, nb in rows)
    fig, axes = plt.subplots(len(rows), k + 1, figsize=(1.3 * (k + 1), 1.3 * len(rows)), squeeze=False)
    for r, (query, neighbors) in enumerate(rows):
        axes[r, 0].imshow(_displayable(query), cmap="gray")
        axes[r, 0].set_title("query", fontsize=7)
        for c in range(k):
            ax = axes[r, c + 1]
            if c < len(neighbors):
                tensor, dist = neighbors[c]
                ax.imshow(_displayable(tensor), cmap="gray")
                ax.set_title(f"{dist:.3f}", fontsize=7)
        for ax in axes[r]:
            ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
