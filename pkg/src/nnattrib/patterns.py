"""Signal-direction ("pattern") estimation for PatternNet / PatternAttribution.

For every output unit ``j`` of every dense/conv layer we estimate

    a_j = cov(x, y_j) / (w_j . cov(x, y_j))

from streaming sums of ``x``, ``y_j`` and ``x * y_j``. Units feeding a ReLU use
only samples where the unit fires (``y_j > 0``); other units use all samples.
Conv layers share one pattern per output channel; every spatial window is one
``(x, y)`` sample.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ModelError, ShapeError
from .forward import forward
from .model_io import encode_tensors, load_tensors, parse_manifest
from .rules import linear_view

DEGENERACY_RATIO = 1e-12


class PatternFileError(ModelError):
    pass


@dataclass
class LayerStats:
    n_all: int
    sx_all: np.ndarray
    sy_all: np.ndarray
    sxy_all: np.ndarray
    n_pos: np.ndarray
    sx_pos: np.ndarray
    sy_pos: np.ndarray
    sxy_pos: np.ndarray

    @classmethod
    def empty(cls, k: int, units: int) -> "LayerStats":
        return cls(0, np.zeros(k), np.zeros(units), np.zeros((k, units)),
                   np.zeros(units, dtype=np.int64), np.zeros((k, units)), np.zeros(units), np.zeros((k, units)))

    def update(self, rows: np.ndarray, y: np.ndarray) -> None:
        """Add samples: ``rows`` is [samples, k], ``y`` the [samples, units] pre-activations."""
        pos = (y > 0).astype(np.float64)
        ypos = y * pos
        self.n_all += rows.shape[0]
        self.sx_all += rows.sum(axis=0)
        self.sy_all += y.sum(axis=0)
        self.sxy_all += rows.T @ y
        self.n_pos += (y > 0).sum(axis=0)
        self.sx_pos += rows.T @ pos
        self.sy_pos += ypos.sum(axis=0)
        self.sxy_pos += rows.T @ ypos

    def __add__(self, other: "LayerStats") -> "LayerStats":
        return LayerStats(*(getattr(self, f) + getattr(other, f) for f in self.__dataclass_fields__))

    def covariance(self, regime: str) -> tuple:
        """Per-unit ``cov(x, y_j)`` as a [k, units] matrix, plus the per-unit sample counts."""
        if regime == "positive":
            n = self.n_pos.astype(np.float64)
            safe = np.maximum(n, 1.0)
            exy = self.sxy_pos / safe
            ex = self.sx_pos / safe
            ey = self.sy_pos / safe
            c = exy - ex * ey
            scale = np.linalg.norm(exy, axis=0) + np.linalg.norm(ex, axis=0) * np.abs(ey)
        else:
            n = np.full(self.sy_all.shape, float(self.n_all))
            safe = max(float(self.n_all), 1.0)
            exy = self.sxy_all / safe
            ex = self.sx_all / safe
            ey = self.sy_all / safe
            c = exy - np.outer(ex, ey)
            scale = np.linalg.norm(exy, axis=0) + np.linalg.norm(ex) * np.abs(ey)
        # covariance lost entirely to cancellation counts as zero
        c = np.where(np.linalg.norm(c, axis=0) <= 64 * np.finfo(float).eps * scale, 0.0, c)
        return c, n


@dataclass
class PatternStats:
    """Streaming moments for every linear layer, keyed by layer index."""

    layers: dict = field(default_factory=dict)

    def __add__(self, other: "PatternStats") -> "PatternStats":
        keys = set(self.layers) | set(other.layers)
        merged = {}
        for i in sorted(keys):
            if i in self.layers and i in other.layers:
                merged[i] = self.layers[i] + other.layers[i]
            else:
                merged[i] = copy.deepcopy(self.layers.get(i) or other.layers[i])
        return PatternStats(merged)

    merge = __add__


@dataclass
class Patterns:
    """Fitted patterns, one array per dense/conv layer with that layer's weight shape."""

    arrays: dict
    degenerate: dict = field(default_factory=dict)
    regimes: dict = field(default_factory=dict)


def regime_of(m, i: int) -> str:
    nxt = i + 1
    return "positive" if nxt < len(m.layers) and m.layers[nxt].kind == "relu" else "linear"


def accumulate(stats, m, batch) -> PatternStats:
    """New stats with the (input, pre-activation) pairs of ``batch`` added."""
    out = PatternStats({i: copy.deepcopy(s) for i, s in stats.layers.items()}) if stats is not None else PatternStats()
    for x in batch:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != m.input_shape:
            raise ShapeError(f"sample shape {list(x.shape)} does not match model input {list(m.input_shape)}")
        _, tape = forward(m, x)
        for i in m.linear_layers():
            v = linear_view(m, tape[i])
            y = v.out_rows(tape[i].output)
            if i not in out.layers:
                out.layers[i] = LayerStats.empty(v.rows.shape[1], y.shape[1])
            out.layers[i].update(v.rows, y)
    return out


def finalize(stats: PatternStats, m) -> Patterns:
    arrays, degenerate, regimes = {}, {}, {}
    for i in m.linear_layers():
        layer = m.layers[i]
        w = m.weight(i)
        wmat = w if layer.kind == "dense" else w.reshape(layer.out_channels, -1).T
        regime = regime_of(m, i)
        regimes[i] = regime
        s = stats.layers.get(i)
        if s is None:
            arrays[i] = np.zeros_like(w)
            degenerate[i] = list(range(wmat.shape[1]))
            continue
        c, n = s.covariance(regime)
        wc = (wmat * c).sum(axis=0)
        bound = DEGENERACY_RATIO * np.linalg.norm(c, axis=0) * np.linalg.norm(wmat, axis=0)
        bad = (n < 2) | ~(np.abs(wc) > bound)
        a = np.where(bad, 0.0, c / np.where(bad, 1.0, wc))
        arrays[i] = a if layer.kind == "dense" else a.T.reshape(w.shape)
        degenerate[i] = [int(j) for j in np.flatnonzero(bad)]
    return Patterns(arrays, degenerate, regimes)


def fit_patterns(m, samples, batch_size: int = 256) -> Patterns:
    stats = PatternStats()
    samples = list(samples)
    for start in range(0, len(samples), batch_size):
        stats = accumulate(stats, m, samples[start:start + batch_size])
    return finalize(stats, m)


def save_patterns(p: Patterns) -> tuple:
    """Serialize to ``(manifest_bytes, blob_bytes)`` in the model weight format."""
    tensors = {f"pattern_{i}": np.asarray(a, dtype=np.float64) for i, a in sorted(p.arrays.items())}
    entries, blob = encode_tensors(tensors)
    doc = {
        "input_shape": [],
        "layers": [],
        "tensors": entries,
        "metadata": {
            "degenerate": {str(i): list(v) for i, v in sorted(p.degenerate.items())},
            "regimes": {str(i): r for i, r in sorted(p.regimes.items())},
        },
    }
    return json.dumps(doc, indent=2).encode("utf-8"), blob


def load_patterns(manifest_text, blob: bytes, m) -> Patterns:
    try:
        doc = parse_manifest(manifest_text)
        tensors, _ = load_tensors(doc, blob)
    except ModelError as exc:
        raise PatternFileError(f"malformed pattern file: {exc}") from None
    arrays = {}
    for name, arr in tensors.items():
        if not name.startswith("pattern_") or not name[len("pattern_"):].isdigit():
            raise PatternFileError(f"unexpected tensor {name!r} in pattern file")
        arrays[int(name[len("pattern_"):])] = arr
    linear = m.linear_layers()
    for i in arrays:
        if i not in linear:
            raise PatternFileError(f"pattern for layer {i}, which is not a dense/conv layer")
    for i in linear:
        if i not in arrays:
            raise PatternFileError(f"pattern file incomplete: no pattern for layer {i}")
        want = m.weight(i).shape
        if arrays[i].shape != want:
            raise PatternFileError(
                f"pattern for layer {i} has shape {list(arrays[i].shape)}, layer weights are {list(want)}"
            )
    meta = doc.get("metadata", {})
    degenerate = {int(k): list(v) for k, v in meta.get("degenerate", {}).items()}
    regimes = {int(k): v for k, v in meta.get("regimes", {}).items()}
    return Patterns(arrays, degenerate, regimes)
