"""Matplotlib report figures written next to the CSV/tensor outputs.

Figures are saved through the Agg backend with the PNG ``Software`` tag
removed so that reruns produce byte-identical files.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from camkit.render import grayscale, render_overlay  # noqa: E402

RC = {
    "font.size": 8,
    "axes.titlesize": 8,
    "axes.labelsize": 8,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "savefig.bbox": "standard",
}


def _save(fig, path):
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def _middle(a):
    """2D view of a 2D or 3D ``(*spatial)`` array: the central axial slice for volumes."""
    return a[a.shape[0] // 2] if a.ndim == 3 else a


def plot_attention_panel(base, maps, path, alpha=0.5):
    """Input next to one overlay per attention map (central slice for 3D inputs)."""
    maps = list(maps)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, len(maps) + 1, figsize=(2.0 * (len(maps) + 1), 2.2))
        axes = np.atleast_1d(axes)
        axes[0].imshow(_middle(grayscale(base)), cmap="gray", vmin=0, vmax=1)
        axes[0].set_title("input")
        for ax, amap in zip(axes[1:], maps):
            ax.imshow(_middle(render_overlay(base, amap, alpha)))
            ax.set_title(f"{amap.backend} {amap.layer} c{amap.class_id}")
        for ax in axes:
            ax.set_axis_off()
        fig.tight_layout()
        _save(fig, path)
    return Path(path)


def plot_evaluation(records, path):
    """Horizontal bar chart, one bar per evaluation record."""
    records = list(records)
    with plt.rc_context(RC):
        height = max(1.6, 0.28 * len(records) + 0.8)
        fig, ax = plt.subplots(figsize=(5.0, height))
        labels = [f"{r.input_id} / {r.layer} / {r.backend}" for r in records]
        scores = [r.score for r in records]
        ypos = np.arange(len(records))
        ax.barh(ypos, scores, color="#c0392b", height=0.6)
        ax.set_yticks(ypos, labels)
        ax.invert_yaxis()
        ax.set_xlim(0, 1)
        metric = records[0].metric if records else "score"
        ax.set_xlabel(metric)
        if not records:
            ax.text(0.5, 0.5, "no records", ha="center", va="center", transform=ax.transAxes)
        fig.tight_layout()
        _save(fig, path)
    return Path(path)
