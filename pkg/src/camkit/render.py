"""Jet colormap and alpha-blended overlays of attention maps on grayscale inputs."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from camkit.errors import DimensionError
from camkit.fileio import write_image_ppm

JET_ANCHORS = np.array([0.0, 0.125, 0.375, 0.625, 0.875, 1.0])
JET_COLORS = np.array(
    [
        [0, 0, 131],
        [0, 60, 170],
        [5, 255, 255],
        [255, 255, 0],
        [250, 0, 0],
        [128, 0, 0],
    ],
    dtype=np.float64,
)


def round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def jet_float(values) -> np.ndarray:
    """Unrounded jet colors, shape ``values.shape + (3,)``."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.stack([np.interp(v, JET_ANCHORS, JET_COLORS[:, ch]) for ch in range(3)], axis=-1)


def colormap_jet(value):
    """Scalar or array in ``[0, 1]`` (clamped) to uint8 RGB."""
    rgb = round_half_up(jet_float(value)).astype(np.uint8)
    if np.ndim(value) == 0:
        return tuple(int(c) for c in rgb)
    return rgb


def grayscale(base) -> np.ndarray:
    """Collapse ``(C, *spatial)`` to one channel in ``[0, 1]``.

    Channels are averaged.  Data already inside ``[0, 1]`` is used as is;
    anything else is min-max stretched.
    """
    base = np.asarray(base, dtype=np.float64)
    gray = base.mean(axis=0)
    lo, hi = gray.min(), gray.max()
    if lo < 0.0 or hi > 1.0:
        gray = (gray - lo) / (hi - lo) if hi > lo else np.zeros_like(gray)
    return gray


def render_overlay(base, attention, alpha=0.5) -> np.ndarray:
    """Blend ``(1 - alpha) * gray(base) + alpha * jet(map)`` to uint8 RGB.

    Returns ``(H, W, 3)`` for 2D inputs and ``(D, H, W, 3)`` for 3D inputs.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    values = np.asarray(getattr(attention, "values", attention), dtype=np.float64)
    base = np.asarray(base, dtype=np.float64)
    if values.ndim == base.ndim:
        values = values[0] if values.shape[0] == 1 else values.max(axis=0)
    if values.shape != base.shape[1:]:
        raise DimensionError(
            f"map spatial shape {values.shape} != base spatial shape {base.shape[1:]}"
        )
    gray = grayscale(base)[..., None] * 255.0
    out = (1.0 - alpha) * gray + alpha * colormap_jet(values).astype(np.float64)
    return np.clip(round_half_up(out), 0, 255).astype(np.uint8)


def slice_paths(path, depth):
    path = Path(path)
    return [path.with_name(f"{path.stem}_z{k}.ppm") for k in range(depth)]


def write_overlay(overlay, path):
    """Write a 2D overlay to ``path`` or a 3D stack as ``<stem>_z<k>.ppm`` slices."""
    path = Path(path)
    if overlay.ndim == 3:
        write_image_ppm(overlay, path)
        return [path]
    paths = slice_paths(path, overlay.shape[0])
    for k, p in enumerate(paths):
        write_image_ppm(overlay[k], p)
    return paths
