"""Forward evaluation with a per-layer tape."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import ShapeError
from .model_io import Conv2D, Model, conv_padding


@dataclass(frozen=True)
class TapeEntry:
    layer_index: int
    input: np.ndarray
    output: np.ndarray
    aux: Any = None
    analyzable: bool = True


@dataclass(frozen=True)
class Tape:
    entries: tuple
    logits: np.ndarray

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        return self.entries[i]


@dataclass(frozen=True)
class NeuronSelector:
    """Which output unit to analyze: the argmax logit or a fixed index."""

    mode: str = "max"
    index: Optional[int] = None

    def __post_init__(self):
        if self.mode not in ("max", "index"):
            raise ValueError(f"selector mode must be 'max' or 'index', got {self.mode!r}")
        if self.mode == "index" and (self.index is None or self.index < 0):
            raise ValueError("index selector needs a non-negative index")

    @classmethod
    def parse(cls, text: str) -> "NeuronSelector":
        if text == "max":
            return cls()
        return cls("index", int(text))


# -- im2col views ------------------------------------------------------------

def pad_input(x: np.ndarray, pads) -> np.ndarray:
    (pt, pb), (pl, pr) = pads
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (pt, pb), (pl, pr)))


def windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Strided windows of a [C, H, W] array as [C, out_h, out_w, kh, kw]."""
    v = sliding_window_view(x, (kh, kw), axis=(1, 2))
    return v[:, ::stride, ::stride]


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pads=((0, 0), (0, 0))) -> np.ndarray:
    """Rows are output positions (row-major), columns are (channel, ky, kx)."""
    w = windows(pad_input(x, pads), kh, kw, stride)
    c, oh, ow = w.shape[:3]
    return np.ascontiguousarray(w.transpose(1, 2, 0, 3, 4)).reshape(oh * ow, c * kh * kw)


def col2im(cols: np.ndarray, in_shape, kh: int, kw: int, stride: int, pads=((0, 0), (0, 0))) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add window columns back onto the input grid."""
    c, h, w = in_shape
    (pt, pb), (pl, pr) = pads
    hp, wp = h + pt + pb, w + pl + pr
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    blocks = cols.reshape(oh, ow, c, kh, kw)
    out = np.zeros((c, hp, wp))
    for ky in range(kh):
        for kx in range(kw):
            out[:, ky:ky + stride * oh:stride, kx:kx + stride * ow:stride] += blocks[:, :, :, ky, kx].transpose(2, 0, 1)
    return out[:, pt:pt + h, pl:pl + w]


def conv_matrix(layer: Conv2D, weight: np.ndarray) -> np.ndarray:
    """Conv weights [out, in, kh, kw] as the [in*kh*kw, out] matrix acting on im2col rows."""
    return weight.reshape(layer.out_channels, -1).T


# -- layers ------------------------------------------------------------------

def layer_forward(layer, x: np.ndarray, weight=None, bias=None):
    """Evaluate a single layer. Returns ``(y, aux)``; aux holds max-pool winners."""
    kind = layer.kind
    if kind == "dense":
        if x.shape != (layer.in_features,):
            raise ShapeError(f"dense expects input [{layer.in_features}], got {list(x.shape)}")
        y = T.matmul(x[None, :], weight)[0]
        return (y + bias if bias is not None else y), None
    if kind == "conv2d":
        if x.ndim != 3 or x.shape[0] != layer.in_channels:
            raise ShapeError(f"conv2d expects [{layer.in_channels}, H, W], got {list(x.shape)}")
        pads = conv_padding(layer, x.shape[1], x.shape[2])
        cols = im2col(x, layer.kernel_h, layer.kernel_w, layer.stride, pads)
        y = T.matmul(cols, conv_matrix(layer, weight))
        if bias is not None:
            y = y + bias
        oh = (x.shape[1] + sum(pads[0]) - layer.kernel_h) // layer.stride + 1
        return y.T.reshape(layer.out_channels, oh, -1), None
    if kind in ("maxpool2d", "avgpool2d"):
        if x.ndim != 3:
            raise ShapeError(f"{kind} expects [C, H, W], got {list(x.shape)}")
        win = windows(x, layer.window_h, layer.window_w, layer.stride)
        c, oh, ow = win.shape[:3]
        flat = win.reshape(c, oh, ow, -1)
        if kind == "avgpool2d":
            return flat.mean(axis=-1), None
        arg = np.argmax(flat, axis=-1)
        y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        ky, kx = np.divmod(arg, layer.window_w)
        rows = np.arange(oh)[None, :, None] * layer.stride + ky
        cols = np.arange(ow)[None, None, :] * layer.stride + kx
        chans = np.arange(c)[:, None, None]
        winners = (chans * x.shape[1] + rows) * x.shape[2] + cols
        return y, winners
    if kind == "relu":
        return np.maximum(x, 0.0), None
    if kind == "flatten":
        return x.reshape(-1), None
    if kind == "softmax":
        e = np.exp(x - x.max())
        return e / e.sum(), None
    raise ShapeError(f"layer kind {kind!r} cannot be evaluated")


def forward(m: Model, x) -> tuple:
    """Run ``m`` on ``x``. Returns ``(logits, tape)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != m.input_shape:
        raise ShapeError(f"input shape {list(x.shape)} does not match model input {list(m.input_shape)}")
    entries = []
    h = x
    logits = None
    for i, layer in enumerate(m.layers):
        w = m.weight(i) if layer.kind in ("dense", "conv2d") else None
        b = m.bias(i) if w is not None else None
        y, aux = layer_forward(layer, h, w, b)
        entries.append(TapeEntry(i, h, y, aux, layer.kind != "softmax"))
        if layer.kind != "softmax":
            logits = y
        h = y
    if logits is None:
        logits = x
    return logits, Tape(tuple(entries), logits)


def predict(m: Model, x) -> np.ndarray:
    return forward(m, x)[0]


def select_neuron(logits: np.ndarray, sel: NeuronSelector, relevance: bool = False) -> tuple:
    """Pick the analyzed unit and build the backward seed.

    The seed is one-hot at the unit, scaled by 1.0 (gradient family) or by the
    logit itself when ``relevance`` is set.
    """
    if logits.ndim != 1:
        raise ShapeError(f"logits must be rank 1, got {list(logits.shape)}")
    if sel.mode == "max":
        k = T.reduce("argmax", logits)
    else:
        k = sel.index
        if not 0 <= k < logits.size:
            raise IndexError(f"selected unit {k} out of range for {logits.size} logits")
    seed = np.zeros_like(logits)
    seed[k] = logits[k] if relevance else 1.0
    return k, seed
