"""Matplotlib figure rendering for the CLI report paths.

Figures are written as PNG next to the delimited outputs. The Agg backend
is forced so rendering works headless, and no timestamps are embedded, so
outputs stay byte-reproducible.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_DPI = 110


def save_loss_trace_figure(trace, path) -> None:
    """Per-term loss curves versus iteration, with stage boundaries marked."""
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    iters = [row.iteration for row in trace]
    for term in ("image", "smooth", "consistency", "explainability", "total"):
        ax.plot(iters, [getattr(row, term) for row in trace], label=term, linewidth=1.0)
    prev_scale = None
    for row in trace:
        if row.scale != prev_scale and prev_scale is not None:
            ax.axvline(row.iteration, color="0.7", linestyle=":", linewidth=0.8)
        prev_scale = row.scale
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8, ncol=2)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_map_figure(values, path, title: str = "", units: str = "") -> None:
    """Render a scalar map (disparity, depth, mask) with a colorbar."""
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    im = ax.imshow(values, cmap="magma")
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    cbar = fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    if units:
        cbar.set_label(units)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_error_map_figure(pred, gt, valid, path) -> None:
    """Relative-error map of a prediction against ground truth."""
    import numpy as np

    rel = np.zeros_like(np.asarray(gt, dtype=float))
    g = np.asarray(gt, dtype=float)
    p = np.asarray(pred, dtype=float)
    m = valid & (g > 0)
    rel[m] = np.abs(p[m] - g[m]) / g[m]
    rel[~m] = np.nan
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    im = ax.imshow(rel, cmap="viridis")
    ax.set_title("relative error")
    ax.set_xticks([])
    ax.set_yticks([])
    cbar = fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    cbar.set_label("|pred - gt| / gt")
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
