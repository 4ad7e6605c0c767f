"""Perturbation analysis ("pixel flipping") and AOPC scoring."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, ShapeError
from .forward import forward


@dataclass(frozen=True)
class PerturbationConfig:
    """Tile size, number of perturbation steps, replacement value and ordering.

    ``value`` is a constant or one constant per input channel. ``order`` is
    ``"descending"`` (by attribution) or ``"random"`` (seeded permutation).
    """

    steps: int
    region: tuple = (1, 1)
    value: Union[float, Sequence[float]] = 0.0
    order: str = "descending"
    seed: int = 0

    def __post_init__(self):
        if self.order not in ("descending", "random"):
            raise ConfigError(f"order must be 'descending' or 'random', got {self.order!r}")
        r = self.region
        if isinstance(r, int):
            object.__setattr__(self, "region", (r, r))
        if len(self.region) != 2 or min(self.region) < 1:
            raise ConfigError(f"region must be two positive sizes, got {self.region}")

    def describe(self) -> dict:
        v = self.value
        return {
            "region": list(self.region),
            "steps": self.steps,
            "value": list(v) if isinstance(v, (list, tuple, np.ndarray)) else v,
            "order": self.order,
            "seed": self.seed,
            "clipping": "none",
        }


@dataclass
class PerturbationCurve:
    scores: list
    aopc: float
    unit: int = 0
    order: list = field(default_factory=list)

    def to_record(self, method: str, cfg: Optional[PerturbationConfig] = None) -> dict:
        return {
            "scores": list(self.scores),
            "aopc": self.aopc,
            "method": method,
            "config": cfg.describe() if cfg is not None else {},
            "selected_unit": self.unit,
        }


def region_masks(shape, region) -> list:
    """Boolean masks of the non-overlapping tiles of an input, row-major.

    Flat inputs ``[F]`` are tiled along their only axis with tiles of
    ``region[0] * region[1]`` elements; spatial ``[C, H, W]`` inputs are tiled
    over ``H x W`` and every tile spans all channels.
    """
    shape = tuple(shape)
    rh, rw = region
    masks = []
    if len(shape) == 1:
        size = rh * rw
        if shape[0] % size:
            raise ConfigError(f"region of {size} elements does not tile input of length {shape[0]}")
        for start in range(0, shape[0], size):
            m = np.zeros(shape, dtype=bool)
            m[start:start + size] = True
            masks.append(m)
        return masks
    if len(shape) != 3:
        raise ShapeError(f"cannot tile input of shape {list(shape)}")
    _, h, w = shape
    if h % rh or w % rw:
        raise ConfigError(f"region {rh}x{rw} does not tile a {h}x{w} input")
    for top in range(0, h, rh):
        for left in range(0, w, rw):
            m = np.zeros(shape, dtype=bool)
            m[:, top:top + rh, left:left + rw] = True
            masks.append(m)
    return masks


def rank_regions(attr: np.ndarray, masks: list) -> list:
    """Region indices by descending summed attribution, ties to the lowest index."""
    sums = [math.fsum(attr[m].tolist()) for m in masks]
    return sorted(range(len(masks)), key=lambda r: (-sums[r], r))


def _fill(x: np.ndarray, mask: np.ndarray, value) -> None:
    if np.ndim(value) == 0:
        x[mask] = value
        return
    value = np.asarray(value, dtype=np.float64)
    if x.ndim != 3 or value.shape != (x.shape[0],):
        raise ConfigError(f"per-channel value needs {x.shape[0] if x.ndim == 3 else 1} entries")
    x[mask] = np.broadcast_to(value[:, None, None], x.shape)[mask]


def curve_for_order(m, x, unit: int, masks: list, order: Sequence[int], value=0.0) -> list:
    """Selected-unit logit after perturbing ``masks[order[0]], masks[order[1]], ...`` cumulatively."""
    cur = np.array(x, dtype=np.float64)
    scores = [float(forward(m, cur)[0][unit])]
    for r in order:
        _fill(cur, masks[r], value)
        scores.append(float(forward(m, cur)[0][unit]))
    return scores


def aopc(curve) -> float:
    """Mean drop of the score relative to the unperturbed score."""
    scores = curve.scores if isinstance(curve, PerturbationCurve) else list(curve)
    k = len(scores) - 1
    if k < 1:
        raise ConfigError("AOPC needs at least one perturbation step")
    return math.fsum(scores[0] - s for s in scores[1:]) / k


def perturbation_curve(m, x, attr, cfg: PerturbationConfig) -> PerturbationCurve:
    """Perturb the top-ranked regions one by one and track the selected logit.

    ``attr`` is an :class:`~nnattrib.analyzers.Attribution` (its selected unit
    is monitored) or a bare array, in which case the argmax unit is used.
    """
    x = np.asarray(x, dtype=np.float64)
    values = np.asarray(getattr(attr, "values", attr), dtype=np.float64)
    if values.shape != x.shape:
        raise ShapeError(f"attribution shape {list(values.shape)} does not match input {list(x.shape)}")
    unit = getattr(attr, "selected_unit", None)
    if unit is None:
        unit = int(np.argmax(forward(m, x)[0]))
    masks = region_masks(x.shape, cfg.region)
    if not 1 <= cfg.steps <= len(masks):
        raise ConfigError(f"steps must be in [1, {len(masks)}], got {cfg.steps}")
    if cfg.order == "descending":
        order = rank_regions(values, masks)
    else:
        order = [int(r) for r in np.random.default_rng(cfg.seed).permutation(len(masks))]
    order = order[:cfg.steps]
    scores = curve_for_order(m, x, unit, masks, order, cfg.value)
    return PerturbationCurve(scores, aopc(scores), unit, order)


def curve_json(records: list) -> bytes:
    return (json.dumps(records, indent=2) + "\n").encode("utf-8")
