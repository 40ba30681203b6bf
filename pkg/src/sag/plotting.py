"""Heatmap rasters and optional matplotlib figures.

PGM heatmaps are produced with numpy alone so they can be compared
bit-for-bit; PNG figures are rendered with matplotlib on request.
"""

from __future__ import annotations

import numpy as np

from sag.grid import PatchGrid, ShapeError, upscale


def minmax_levels(values, maxval: int = 255) -> np.ndarray:
    """Min-max normalize a vector to integer gray levels in ``[0, maxval]``.

    A constant vector has no range to stretch and maps to mid-gray.
    """
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("heatmap values must be finite")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.full(v.shape, (maxval + 1) // 2, dtype=np.int64)
    return np.rint((v - lo) / (hi - lo) * maxval).astype(np.int64)


def heatmap_raster(values, grid: PatchGrid, maxval: int = 255) -> np.ndarray:
    """Patch vector -> full-resolution gray raster, nearest-neighbour upscaled."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (grid.p,):
        raise ShapeError(f"expected {grid.p} patch values, got shape {values.shape}")
    return upscale(minmax_levels(values, maxval), grid)


def side_by_side(rasters, gap: int = 2, fill: int = 0) -> np.ndarray:
    """Concatenate equal-height rasters left to right with a separator strip."""
    rasters = [np.asarray(r) for r in rasters]
    h = rasters[0].shape[0]
    if any(r.shape[0] != h for r in rasters):
        raise ShapeError("rasters must share a height")
    parts = []
    for i, r in enumerate(rasters):
        if i:
            parts.append(np.full((h, gap), fill, dtype=r.dtype))
        parts.append(r)
    return np.hstack(parts)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def save_heatmap_png(path, panels: dict, slide_raster=None) -> None:
    """One image per named panel (patch-resolution rasters), gray colormap."""
    plt = _pyplot()
    n = len(panels) + (slide_raster is not None)
    fig, axes = plt.subplots(1, n, figsize=(3 * n, 3), squeeze=False)
    axes = axes[0]
    i = 0
    if slide_raster is not None:
        axes[0].imshow(slide_raster, cmap="gray", vmin=0, vmax=255)
        axes[0].set_title("slide")
        i = 1
    for name, raster in panels.items():
        axes[i].imshow(raster, cmap="magma", interpolation="nearest")
        axes[i].set_title(name)
        i += 1
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def save_loss_curves_png(path, epoch_log: list, title: str = "") -> None:
    """Per-epoch loss terms and validation accuracy, one line per seed."""
    plt = _pyplot()
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    seeds = sorted({e["seed"] for e in epoch_log})
    for seed in seeds:
        rows = [e for e in epoch_log if e["seed"] == seed]
        ep = [e["epoch"] for e in rows]
        ax_loss.plot(ep, [e.get("l_cls", np.nan) for e in rows], lw=0.8)
        if any("val" in e for e in rows):
            ax_acc.plot(ep, [e["val"]["acc"] for e in rows], lw=0.8)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training cross entropy")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("validation accuracy")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
