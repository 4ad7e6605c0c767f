"""Small seeded reference models used by the test suite and the demo CLI."""

from __future__ import annotations

import numpy as np

from .model_io import Model, build_model


def _init(rng, fan_in, shape):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def random_mlp(widths, seed: int = 0, bias: bool = True, dtype: str = "f64") -> Model:
    """Dense/ReLU stack with layer widths ``widths`` (input first, logits last)."""
    rng = np.random.default_rng(seed)
    layers, tensors = [], {}
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        rec = {"kind": "dense", "in_features": a, "out_features": b, "weight_ref": f"dense{i}.w"}
        tensors[f"dense{i}.w"] = _init(rng, a, (a, b))
        if bias:
            rec["bias_ref"] = f"dense{i}.b"
            tensors[f"dense{i}.b"] = 0.1 * rng.standard_normal(b)
        layers.append(rec)
        if i < len(widths) - 2:
            layers.append({"kind": "relu"})
    return build_model([widths[0]], layers, tensors, dtype)


def linear_model(seed: int = 0, bias: bool = True, n_in: int = 6, n_out: int = 3) -> Model:
    return random_mlp([n_in, n_out], seed, bias)


def mlp_model(seed: int = 1, bias: bool = True) -> Model:
    return random_mlp([16, 32, 10], seed, bias)


def cnn_model(seed: int = 2, bias: bool = True, channels: int = 4, hidden: int = 16, padding: str = "same") -> Model:
    """conv3x3 -> relu -> maxpool2x2 -> flatten -> dense -> relu -> dense on 1x8x8 inputs."""
    rng = np.random.default_rng(seed)
    side = 8 if padding == "same" else 6
    flat = channels * (side // 2) ** 2
    tensors = {
        "conv.w": _init(rng, 9, (channels, 1, 3, 3)),
        "fc1.w": _init(rng, flat, (flat, hidden)),
        "fc2.w": _init(rng, hidden, (hidden, 10)),
    }
    conv = {"kind": "conv2d", "in_channels": 1, "out_channels": channels, "kernel_h": 3, "kernel_w": 3,
            "stride": 1, "padding": padding, "weight_ref": "conv.w"}
    fc1 = {"kind": "dense", "in_features": flat, "out_features": hidden, "weight_ref": "fc1.w"}
    fc2 = {"kind": "dense", "in_features": hidden, "out_features": 10, "weight_ref": "fc2.w"}
    if bias:
        tensors["conv.b"] = 0.1 * rng.standard_normal(channels)
        tensors["fc1.b"] = 0.1 * rng.standard_normal(hidden)
        tensors["fc2.b"] = 0.1 * rng.standard_normal(10)
        conv["bias_ref"], fc1["bias_ref"], fc2["bias_ref"] = "conv.b", "fc1.b", "fc2.b"
    layers = [
        conv,
        {"kind": "relu"},
        {"kind": "maxpool2d", "window_h": 2, "window_w": 2, "stride": 2},
        {"kind": "flatten"},
        fc1,
        {"kind": "relu"},
        fc2,
    ]
    return build_model([1, 8, 8], layers, tensors)


def zoo(bias: bool = True) -> dict:
    return {
        "linear": linear_model(bias=bias),
        "mlp": mlp_model(bias=bias),
        "cnn": cnn_model(bias=bias),
    }
