"""Per-layer backward rules.

Dense and conv layers are handled through one matrix form: the layer input is
a stack of rows ``x`` (a single row for dense, one im2col window per output
position for conv), ``W`` maps a row to the output units and ``R`` holds one
row of upstream signal per output position. Every linear rule is written once
against that form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .forward import col2im, conv_matrix, im2col, windows
from .model_io import Model, conv_padding


@dataclass
class LinearView:
    """Matrix form of a dense or conv layer at one tape entry."""

    rows: np.ndarray
    weight: np.ndarray
    bias: Optional[np.ndarray]
    in_shape: tuple
    out_shape: tuple
    layer: object
    pads: tuple = ((0, 0), (0, 0))

    def out_rows(self, r: np.ndarray) -> np.ndarray:
        """Output-shaped signal as [positions, units]."""
        if self.layer.kind == "dense":
            return r.reshape(1, -1)
        return r.reshape(self.out_shape[0], -1).T

    def in_rows(self, x: np.ndarray) -> np.ndarray:
        """Input-shaped array (e.g. bounds) in the same row layout as ``rows``."""
        if self.layer.kind == "dense":
            return x.reshape(1, -1)
        l = self.layer
        return im2col(x, l.kernel_h, l.kernel_w, l.stride, self.pads)

    def to_input(self, cols: np.ndarray) -> np.ndarray:
        """Fold per-row input signal back to the layer's input shape (adjoint of ``in_rows``)."""
        if self.layer.kind == "dense":
            return cols.reshape(self.in_shape)
        l = self.layer
        return col2im(cols, self.in_shape, l.kernel_h, l.kernel_w, l.stride, self.pads)

    def matrix(self, w: np.ndarray) -> np.ndarray:
        """Bring a weight-shaped tensor (weights, patterns) to matrix form."""
        return w if self.layer.kind == "dense" else conv_matrix(self.layer, w)


def linear_view(m: Model, entry) -> LinearView:
    i = entry.layer_index
    layer = m.layers[i]
    x = entry.input
    if layer.kind == "dense":
        return LinearView(x.reshape(1, -1), m.weight(i), m.bias(i), x.shape, entry.output.shape, layer)
    pads = conv_padding(layer, x.shape[1], x.shape[2])
    rows = im2col(x, layer.kernel_h, layer.kernel_w, layer.stride, pads)
    return LinearView(rows, conv_matrix(layer, m.weight(i)), m.bias(i), x.shape, entry.output.shape, layer, pads)


def _mm(a, b):
    return T.matmul(a, b)


# -- gradient-family rules -----------------------------------------------------

def relu_backward(rule: str, upstream: np.ndarray, forward_input: np.ndarray) -> np.ndarray:
    """ReLU backward for the gradient, deconvnet and guided-backprop rules."""
    if upstream.shape != forward_input.shape:
        raise ShapeError(f"relu backward: {list(upstream.shape)} vs {list(forward_input.shape)}")
    if rule == "gradient":
        return np.where(forward_input > 0, upstream, 0.0)
    if rule == "deconvnet":
        return np.maximum(upstream, 0.0)
    if rule == "guided":
        return np.where(forward_input > 0, np.maximum(upstream, 0.0), 0.0)
    raise ValueError(f"unknown relu rule {rule!r}")


def linear_backward(view: LinearView, upstream: np.ndarray, weight=None) -> np.ndarray:
    """Transpose of the linear map; ``weight`` overrides the layer's own matrix."""
    w = view.weight if weight is None else weight
    return view.to_input(_mm(view.out_rows(upstream), w.T))


def pattern_backward_linear(mode: str, W: np.ndarray, A: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient backward through ``x @ W`` with ``W`` swapped for a pattern.

    ``mode="net"`` back-projects through ``A``; ``mode="attribution"`` through
    ``W * A``. ``upstream`` is [rows, units] (or a single vector).
    """
    if A is None:
        raise ShapeError("pattern missing for linear layer")
    if A.shape != W.shape:
        raise ShapeError(f"pattern shape {list(A.shape)} does not match weights {list(W.shape)}")
    if mode == "net":
        M = A
    elif mode == "attribution":
        M = W * A
    else:
        raise ValueError(f"unknown pattern mode {mode!r}")
    up = np.atleast_2d(upstream)
    out = _mm(up, M.T)
    return out if upstream.ndim == 2 else out[0]


def _scatter_windows(vals: np.ndarray, in_shape, layer) -> np.ndarray:
    """Scatter-add [C, oh, ow, wh, ww] window values onto a [C, H, W] grid."""
    c, oh, ow, wh, ww = vals.shape
    s = layer.stride
    out = np.zeros(in_shape)
    for ky in range(wh):
        for kx in range(ww):
            out[:, ky:ky + s * oh:s, kx:kx + s * ow:s] += vals[:, :, :, ky, kx]
    return out


def maxpool_backward(entry, upstream: np.ndarray) -> np.ndarray:
    """Route each window's signal to its recorded winner; overlaps accumulate."""
    out = np.zeros(entry.input.size)
    np.add.at(out, entry.aux.ravel(), upstream.ravel())
    return out.reshape(entry.input.shape)


def avgpool_backward(layer, entry, upstream: np.ndarray) -> np.ndarray:
    n = layer.window_h * layer.window_w
    c, oh, ow = upstream.shape
    vals = np.broadcast_to((upstream / n)[..., None, None], (c, oh, ow, layer.window_h, layer.window_w))
    return _scatter_windows(vals, entry.input.shape, layer)


# -- relevance rules -----------------------------------------------------------

def lrp_linear_rule(rule: str, x: np.ndarray, W: np.ndarray, b, R_out: np.ndarray, *,
                    epsilon: float = 1e-6, alpha: float = 1.0, beta: float = 0.0) -> np.ndarray:
    """Redistribute ``R_out`` onto the inputs of ``x @ W + b``.

    ``x`` is [rows, in] or a vector, ``R_out`` the matching [rows, out] or
    vector. Contributions are ``z_ij = x_i * W_ij``; the bias sits in the
    denominator only. Output units whose (stabilized) denominator is exactly
    zero pass no relevance on.
    """
    vector = x.ndim == 1
    x = np.atleast_2d(x)
    R = np.atleast_2d(R_out)
    b = np.zeros(W.shape[1]) if b is None else np.asarray(b)
    if rule in ("z", "epsilon"):
        den = _mm(x, W) + b
        if rule == "epsilon":
            den = T.stabilize(den, epsilon)
        s = T.safe_divide(R, den)
        out = x * _mm(s, W.T)
    elif rule == "alphabeta":
        xp, xn = np.maximum(x, 0.0), np.minimum(x, 0.0)
        Wp, Wn = np.maximum(W, 0.0), np.minimum(W, 0.0)
        den_pos = _mm(xp, Wp) + _mm(xn, Wn) + np.maximum(b, 0.0)
        den_neg = _mm(xp, Wn) + _mm(xn, Wp) + np.minimum(b, 0.0)
        # a unit with contributions of one sign only passes R through that
        # share with weight alpha - beta = 1, keeping the layer conservative
        only_pos = (den_neg == 0.0) & (den_pos != 0.0)
        only_neg = (den_pos == 0.0) & (den_neg != 0.0)
        sp = T.safe_divide(R, den_pos) * np.where(only_pos, alpha - beta, alpha)
        sn = T.safe_divide(R, den_neg) * np.where(only_neg, beta - alpha, beta)
        pos = xp * _mm(sp, Wp.T) + xn * _mm(sp, Wn.T)
        neg = xp * _mm(sn, Wn.T) + xn * _mm(sn, Wp.T)
        out = pos - neg
    else:
        raise ValueError(f"unknown LRP rule {rule!r}")
    return out[0] if vector else out


def bounded_rule(x: np.ndarray, W: np.ndarray, R_out: np.ndarray, low: np.ndarray, high: np.ndarray) -> np.ndarray:
    """Input-layer rule for a box-constrained domain ``low <= x <= high``.

    Contribution of input i to unit j is ``x_i W_ij - low_i W+_ij - high_i W-_ij``,
    which is non-negative whenever x lies in the box.
    """
    vector = x.ndim == 1
    x, R, low, high = (np.atleast_2d(a) for a in (x, R_out, low, high))
    Wp, Wn = np.maximum(W, 0.0), np.minimum(W, 0.0)
    den = _mm(x, W) - _mm(low, Wp) - _mm(high, Wn)
    s = T.safe_divide(R, den)
    out = x * _mm(s, W.T) - low * _mm(s, Wp.T) - high * _mm(s, Wn.T)
    return out[0] if vector else out


def lrp_pool_rule(kind: str, layer, entry, R_out: np.ndarray) -> np.ndarray:
    """Max: all relevance to the recorded winner. Avg: proportional to each input's share."""
    if kind == "max":
        return maxpool_backward(entry, R_out)
    if kind == "avg":
        win = windows(entry.input, layer.window_h, layer.window_w, layer.stride)
        den = T.stabilize(win.sum(axis=(-2, -1)), 1e-9)
        s = R_out / den
        return _scatter_windows(win * s[..., None, None], entry.input.shape, layer)
    raise ValueError(f"unknown pool kind {kind!r}")


# -- rule tables -----------------------------------------------------------------

RuleFn = Callable


def _flatten(ctx, entry, up):
    return up.reshape(entry.input.shape)


def _maxpool_grad(ctx, entry, up):
    return maxpool_backward(entry, up)


def _avgpool_grad(ctx, entry, up):
    return avgpool_backward(ctx.model.layers[entry.layer_index], entry, up)


def _linear_grad(ctx, entry, up):
    return linear_backward(linear_view(ctx.model, entry), up)


def _relu(rule):
    def fn(ctx, entry, up):
        return relu_backward(rule, up, entry.input)
    return fn


def _identity(ctx, entry, up):
    return up


def _lrp_linear(rule, **kw):
    def fn(ctx, entry, up):
        v = linear_view(ctx.model, entry)
        return v.to_input(lrp_linear_rule(rule, v.rows, v.weight, v.bias, v.out_rows(up), **kw))
    return fn


def _lrp_avgpool(ctx, entry, up):
    return lrp_pool_rule("avg", ctx.model.layers[entry.layer_index], entry, up)


def _lrp_maxpool(ctx, entry, up):
    return lrp_pool_rule("max", ctx.model.layers[entry.layer_index], entry, up)


def _deep_taylor_linear(ctx, entry, up):
    v = linear_view(ctx.model, entry)
    R = v.out_rows(up)
    if entry.layer_index != ctx.first_linear:
        return v.to_input(lrp_linear_rule("alphabeta", v.rows, v.weight, v.bias, R, alpha=1.0, beta=0.0))
    low, high = ctx.bounds_for(entry.input.shape)
    return v.to_input(bounded_rule(v.rows, v.weight, R, v.in_rows(low), v.in_rows(high)))


def _pattern_linear(mode):
    def fn(ctx, entry, up):
        v = linear_view(ctx.model, entry)
        A = v.matrix(ctx.pattern(entry.layer_index))
        return v.to_input(pattern_backward_linear(mode, v.weight, A, v.out_rows(up)))
    return fn


def gradient_rules(relu_rule: str = "gradient") -> dict:
    return {
        "dense": _linear_grad,
        "conv2d": _linear_grad,
        "relu": _relu(relu_rule),
        "maxpool2d": _maxpool_grad,
        "avgpool2d": _avgpool_grad,
        "flatten": _flatten,
    }


def lrp_rules(rule: str, **kw) -> dict:
    linear = _lrp_linear(rule, **kw)
    return {
        "dense": linear,
        "conv2d": linear,
        "relu": _identity,
        "maxpool2d": _lrp_maxpool,
        "avgpool2d": _lrp_avgpool,
        "flatten": _flatten,
    }


def deep_taylor_rules() -> dict:
    rules = lrp_rules("alphabeta", alpha=1.0, beta=0.0)
    rules["dense"] = rules["conv2d"] = _deep_taylor_linear
    return rules


def pattern_rules(mode: str) -> dict:
    rules = gradient_rules()
    rules["dense"] = rules["conv2d"] = _pattern_linear(mode)
    return rules
