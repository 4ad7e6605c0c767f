"""Blue-white-red heatmaps written as binary PPM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class HeatmapSpec:
    colormap: str = "bwr"
    normalization: str = "maxabs"


def heatmap_rgb(values) -> np.ndarray:
    """[H, W, 3] uint8 image; positive values shade to red, negative to blue."""
    a = np.asarray(values, dtype=np.float64)
    if a.ndim == 3:
        a = a.sum(axis=0)
    elif a.ndim == 1:
        a = a[None, :]
    elif a.ndim != 2:
        raise ShapeError(f"heatmap needs a rank 1, 2 or 3 attribution, got rank {a.ndim}")
    peak = float(np.abs(a).max())
    v = a / peak if peak > 0 else np.zeros_like(a)
    fade = np.where(v >= 0, 1.0 - v, 1.0 + v)
    level = np.floor(255.0 * fade + 0.5).astype(np.uint8)
    full = np.full(a.shape, 255, dtype=np.uint8)
    pos = v >= 0
    r = np.where(pos, full, level)
    g = level
    b = np.where(pos, level, full)
    return np.stack([r, g, b], axis=-1)


def render_heatmap(attr, spec: HeatmapSpec = HeatmapSpec()) -> bytes:
    """Render an attribution (or bare array) as P6 PPM bytes; channels are summed."""
    if spec.colormap != "bwr" or spec.normalization != "maxabs":
        raise ValueError(f"unsupported heatmap spec {spec}")
    rgb = heatmap_rgb(getattr(attr, "values", attr))
    h, w = rgb.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()
