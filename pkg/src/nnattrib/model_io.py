"""Sequential model description: manifest parsing, validation and serialization.

A model is a JSON manifest plus a raw little-endian weight blob::

    {
      "input_shape": [1, 8, 8],
      "layers": [{"kind": "conv2d", "in_channels": 1, ...}, ...],
      "tensors": {"conv0.w": {"dtype": "f64", "shape": [4, 1, 3, 3], "offset": 0}}
    }

Offsets count elements of the tensor's own dtype. Batchnorm layers are folded
into the preceding dense/conv layer at load time, so the engine only ever sees
linear, relu, pooling, flatten and softmax layers.
"""

from __future__ import annotations

import dataclasses
import json
import math
import sys
from dataclasses import dataclass, field
from typing import ClassVar, Optional

import numpy as np

from .errors import BlobTruncationError, ManifestParseError, ModelError, ShapeChainError

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    weight_ref: str
    bias_ref: Optional[str] = None
    kind: ClassVar[str] = "dense"


@dataclass(frozen=True)
class Conv2D:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    weight_ref: str
    bias_ref: Optional[str] = None
    stride: int = 1
    padding: str = "valid"
    kind: ClassVar[str] = "conv2d"


@dataclass(frozen=True)
class MaxPool2D:
    window_h: int
    window_w: int
    stride: int
    kind: ClassVar[str] = "maxpool2d"


@dataclass(frozen=True)
class AvgPool2D:
    window_h: int
    window_w: int
    stride: int
    kind: ClassVar[str] = "avgpool2d"


@dataclass(frozen=True)
class ReLU:
    kind: ClassVar[str] = "relu"


@dataclass(frozen=True)
class Flatten:
    kind: ClassVar[str] = "flatten"


@dataclass(frozen=True)
class BatchNorm:
    scale_ref: str
    shift_ref: str
    kind: ClassVar[str] = "batchnorm"


@dataclass(frozen=True)
class Softmax:
    kind: ClassVar[str] = "softmax"


LAYER_KINDS = {
    cls.kind: cls for cls in (Dense, Conv2D, MaxPool2D, AvgPool2D, ReLU, Flatten, BatchNorm, Softmax)
}
LINEAR_KINDS = ("dense", "conv2d")


def layer_from_record(record: dict, index: int = 0):
    if not isinstance(record, dict) or "kind" not in record:
        raise ManifestParseError(f"layer {index}: record must be an object with a 'kind'")
    kind = record["kind"]
    cls = LAYER_KINDS.get(kind)
    if cls is None:
        raise ModelError(f"layer {index}: unknown layer kind {kind!r}")
    kwargs = {k: v for k, v in record.items() if k != "kind"}
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(kwargs) - names
    if unknown:
        raise ManifestParseError(f"layer {index} ({kind}): unknown keys {sorted(unknown)}")
    try:
        layer = cls(**kwargs)
    except TypeError as exc:
        raise ManifestParseError(f"layer {index} ({kind}): {exc}") from None
    if isinstance(layer, Conv2D) and layer.padding not in ("valid", "same"):
        raise ManifestParseError(f"layer {index}: padding must be 'valid' or 'same'")
    for f in dataclasses.fields(layer):
        v = getattr(layer, f.name)
        if f.name.endswith("_ref"):
            if v is not None and not isinstance(v, str):
                raise ManifestParseError(f"layer {index} ({kind}): {f.name} must be a string")
        elif f.name != "padding" and (isinstance(v, bool) or not isinstance(v, int) or v < 1):
            raise ManifestParseError(f"layer {index} ({kind}): {f.name} must be a positive integer")
    return layer


def layer_to_record(layer) -> dict:
    rec = {"kind": layer.kind}
    for f in dataclasses.fields(layer):
        v = getattr(layer, f.name)
        if f.name.endswith("_ref") and v is None:
            continue
        rec[f.name] = v
    return rec


def conv_output_size(size: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-size // stride)
    return (size - kernel) // stride + 1


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    """(before, after) zero padding; the odd cell goes after (bottom/right)."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def conv_padding(layer: Conv2D, h: int, w: int) -> tuple[tuple[int, int], tuple[int, int]]:
    if layer.padding == "valid":
        return (0, 0), (0, 0)
    return same_padding(h, layer.kernel_h, layer.stride), same_padding(w, layer.kernel_w, layer.stride)


def expected_input(layer, in_shape):
    """The input shape ``layer`` accepts, given what the previous layer produced."""
    if isinstance(layer, Dense):
        return (layer.in_features,)
    if isinstance(layer, Conv2D):
        if len(in_shape) == 3:
            return (layer.in_channels,) + tuple(in_shape[1:])
        return (layer.in_channels, "H", "W")
    if isinstance(layer, (MaxPool2D, AvgPool2D)):
        return tuple(in_shape) if len(in_shape) == 3 else ("C", "H", "W")
    if isinstance(layer, Softmax):
        return tuple(in_shape) if len(in_shape) == 1 else ("N",)
    return tuple(in_shape)


def output_shape(layer, in_shape):
    """Output shape of ``layer`` for input ``in_shape``; None if incompatible."""
    in_shape = tuple(in_shape)
    if tuple(expected_input(layer, in_shape)) != in_shape:
        return None
    if isinstance(layer, Dense):
        return (layer.out_features,)
    if isinstance(layer, Conv2D):
        _, h, w = in_shape
        oh = conv_output_size(h, layer.kernel_h, layer.stride, layer.padding)
        ow = conv_output_size(w, layer.kernel_w, layer.stride, layer.padding)
        return (layer.out_channels, oh, ow) if oh >= 1 and ow >= 1 else None
    if isinstance(layer, (MaxPool2D, AvgPool2D)):
        c, h, w = in_shape
        oh = (h - layer.window_h) // layer.stride + 1
        ow = (w - layer.window_w) // layer.stride + 1
        return (c, oh, ow) if oh >= 1 and ow >= 1 else None
    if isinstance(layer, Flatten):
        return (math.prod(in_shape),)
    return in_shape


def param_shapes(layer, in_shape=None) -> dict:
    """Expected shape of every tensor ``layer`` references, keyed by ref field."""
    if isinstance(layer, Dense):
        shapes = {"weight_ref": (layer.in_features, layer.out_features)}
        if layer.bias_ref is not None:
            shapes["bias_ref"] = (layer.out_features,)
        return shapes
    if isinstance(layer, Conv2D):
        shapes = {"weight_ref": (layer.out_channels, layer.in_channels, layer.kernel_h, layer.kernel_w)}
        if layer.bias_ref is not None:
            shapes["bias_ref"] = (layer.out_channels,)
        return shapes
    if isinstance(layer, BatchNorm):
        ch = in_shape[0] if in_shape else None
        return {"scale_ref": (ch,), "shift_ref": (ch,)}
    return {}


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    layer_index: Optional[int] = None
    expected: Optional[tuple] = None
    got: Optional[tuple] = None

    def __str__(self):
        return self.message


@dataclass(frozen=True)
class TensorMeta:
    dtype: str
    offset: int


@dataclass
class Model:
    """A validated sequential network bound to its weights.

    ``shapes[i]`` is the input shape of layer ``i``; ``shapes[-1]`` is the
    model output shape.
    """

    input_shape: tuple
    layers: tuple
    tensors: dict
    tensor_meta: dict = field(default_factory=dict)
    folded: tuple = ()
    shapes: tuple = ()

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.layers = tuple(self.layers)
        if not self.shapes:
            self.shapes = tuple(chain_shapes(self.layers, self.input_shape))

    def weight(self, i: int) -> np.ndarray:
        return self.tensors[self.layers[i].weight_ref]

    def bias(self, i: int) -> Optional[np.ndarray]:
        ref = self.layers[i].bias_ref
        return None if ref is None else self.tensors[ref]

    def linear_layers(self) -> list:
        return [i for i, l in enumerate(self.layers) if l.kind in LINEAR_KINDS]

    @property
    def output_shape(self):
        return self.shapes[-1]

    @property
    def n_logits(self) -> int:
        return int(math.prod(self.shapes[self.logit_layer() + 1]))

    def logit_layer(self) -> int:
        """Index of the last non-softmax layer."""
        i = len(self.layers) - 1
        while i >= 0 and self.layers[i].kind == "softmax":
            i -= 1
        return i


def chain_shapes(layers, input_shape) -> list:
    shapes = [tuple(input_shape)]
    for layer in layers:
        out = output_shape(layer, shapes[-1]) if shapes[-1] is not None else None
        shapes.append(out)
    return shapes


def validate_model(m: Model) -> list:
    """Every structural problem of ``m`` as a list of :class:`Diagnostic` (empty if valid)."""
    diags = []
    shape = tuple(m.input_shape)
    if len(shape) not in (1, 3) or any(d < 1 for d in shape):
        diags.append(Diagnostic("input_shape", f"input_shape must be [features] or [channels, height, width] of positive sizes, got {list(shape)}"))
    n = len(m.layers)
    for i, layer in enumerate(m.layers):
        if layer.kind == "softmax" and i != n - 1:
            diags.append(Diagnostic("softmax_position", f"layer {i}: softmax must be final", i))
        if layer.kind == "batchnorm" and (i == 0 or m.layers[i - 1].kind not in LINEAR_KINDS):
            diags.append(Diagnostic("batchnorm_position", f"layer {i}: batchnorm must immediately follow a dense or conv2d layer", i))
        in_shape = shape
        if in_shape is not None:
            out = output_shape(layer, in_shape)
            if out is None:
                exp = expected_input(layer, in_shape)
                diags.append(Diagnostic(
                    "shape_chain",
                    f"layer {i} ({layer.kind}): expects input {list(exp)} but previous layer outputs {list(in_shape)}",
                    i, tuple(in_shape), tuple(exp),
                ))
            shape = out
        for ref_field, want in param_shapes(layer, in_shape).items():
            name = getattr(layer, ref_field)
            if name not in m.tensors:
                diags.append(Diagnostic("dangling_ref", f"layer {i} ({layer.kind}): {ref_field} {name!r} does not name a declared tensor", i))
                continue
            have = tuple(m.tensors[name].shape)
            if len(have) != len(want):
                diags.append(Diagnostic(
                    "param_rank",
                    f"layer {i} ({layer.kind}): tensor {name!r} has rank {len(have)}, expected rank {len(want)}",
                    i, want, have,
                ))
            elif None not in want and have != want:
                diags.append(Diagnostic(
                    "param_shape",
                    f"layer {i} ({layer.kind}): tensor {name!r} has shape {list(have)}, expected {list(want)}",
                    i, want, have,
                ))
    return diags


def load_tensor_blob(entry: dict, blob: bytes, name: str = "?") -> np.ndarray:
    """Decode one manifest tensor entry from ``blob``; f32 data is widened to f64."""
    try:
        dtype = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        offset = entry["offset"]
    except (KeyError, TypeError):
        raise ManifestParseError(f"tensor {name!r}: entry needs dtype in {sorted(_DTYPES)}, shape and offset") from None
    if not all(isinstance(d, int) and not isinstance(d, bool) and d >= 1 for d in shape) or not shape:
        raise ManifestParseError(f"tensor {name!r}: shape must be a non-empty list of positive ints")
    if not isinstance(offset, int) or isinstance(offset, bool) or offset < 0:
        raise ManifestParseError(f"tensor {name!r}: offset must be a non-negative int")
    count = math.prod(shape)
    end = (offset + count) * dtype.itemsize
    if count > sys.maxsize // dtype.itemsize or end > sys.maxsize:
        raise ModelError(f"tensor {name!r}: element count overflow")
    if end > len(blob):
        raise BlobTruncationError(
            f"tensor {name!r}: needs bytes [{offset * dtype.itemsize}, {end}) but blob has {len(blob)}"
        )
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset * dtype.itemsize)
    return arr.astype(np.float64).reshape(shape)


def parse_manifest(manifest_text) -> dict:
    if isinstance(manifest_text, (bytes, bytearray)):
        try:
            manifest_text = manifest_text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ManifestParseError(f"manifest is not UTF-8: {exc}") from None
    try:
        doc = json.loads(manifest_text)
    except json.JSONDecodeError as exc:
        raise ManifestParseError(f"malformed manifest: {exc}") from None
    if not isinstance(doc, dict):
        raise ManifestParseError("manifest must be a JSON object")
    return doc


def load_tensors(doc: dict, blob: bytes):
    entries = doc.get("tensors", {})
    if not isinstance(entries, dict):
        raise ManifestParseError("'tensors' must be an object")
    tensors, meta = {}, {}
    for name, entry in entries.items():
        tensors[name] = load_tensor_blob(entry, blob, name)
        meta[name] = TensorMeta(entry["dtype"], entry["offset"])
    return tensors, meta


def load_model(manifest_text, blob: bytes) -> Model:
    """Parse, validate and batchnorm-fold a model."""
    doc = parse_manifest(manifest_text)
    for key in ("input_shape", "layers", "tensors"):
        if key not in doc:
            raise ManifestParseError(f"manifest is missing {key!r}")
    input_shape = doc["input_shape"]
    if not isinstance(input_shape, list) or not all(isinstance(d, int) for d in input_shape):
        raise ManifestParseError("'input_shape' must be an array of ints")
    if not isinstance(doc["layers"], list):
        raise ManifestParseError("'layers' must be an array")
    layers = [layer_from_record(rec, i) for i, rec in enumerate(doc["layers"])]
    tensors, meta = load_tensors(doc, blob)
    raw = Model(input_shape, layers, tensors, meta)
    diags = validate_model(raw)
    if diags:
        raise_for(diags)
    return fold_batchnorm(raw)


def raise_for(diags: list):
    first = diags[0]
    if first.code == "shape_chain":
        raise ShapeChainError(first.layer_index, first.expected, first.got)
    raise ModelError("; ".join(str(d) for d in diags))


def fold_batchnorm(m: Model) -> Model:
    """Merge each batchnorm into the dense/conv layer before it.

    ``y = scale * (W x + b) + shift`` becomes a single linear layer with
    weights scaled per output channel and bias ``scale * b + shift``.
    """
    if not any(l.kind == "batchnorm" for l in m.layers):
        return m
    tensors = dict(m.tensors)
    layers, folded = [], []
    for i, layer in enumerate(m.layers):
        if layer.kind != "batchnorm":
            layers.append(layer)
            continue
        prev = layers[-1]
        scale = m.tensors[layer.scale_ref]
        shift = m.tensors[layer.shift_ref]
        w = m.tensors[prev.weight_ref]
        b = m.tensors[prev.bias_ref] if prev.bias_ref is not None else np.zeros_like(scale)
        if prev.kind == "dense":
            w_new = w * scale[None, :]
        else:
            w_new = w * scale[:, None, None, None]
        w_ref, b_ref = f"{prev.weight_ref}#bn{i}", f"{prev.bias_ref or prev.weight_ref + '.bias'}#bn{i}"
        tensors[w_ref] = w_new
        tensors[b_ref] = scale * b + shift
        layers[-1] = dataclasses.replace(prev, weight_ref=w_ref, bias_ref=b_ref)
        folded.append(i)
    return Model(m.input_shape, layers, tensors, dict(m.tensor_meta), tuple(folded))


def encode_tensors(tensors: dict, meta: Optional[dict] = None) -> tuple:
    """Lay tensors out in a blob. Returns (manifest tensor entries, blob bytes).

    Tensors with known metadata keep their dtype and offset; the rest are
    appended as f64 after the last byte in use.
    """
    meta = meta or {}
    placed = {}
    end = 0
    for name in tensors:
        if name in meta:
            mt = meta[name]
            size = _DTYPES[mt.dtype].itemsize
            placed[name] = (mt.dtype, mt.offset)
            end = max(end, (mt.offset + tensors[name].size) * size)
    for name in tensors:
        if name not in placed:
            start = -(-end // 8)
            placed[name] = ("f64", start)
            end = (start + tensors[name].size) * 8
    buf = bytearray(end)
    entries = {}
    for name, arr in tensors.items():
        dtype, offset = placed[name]
        dt = _DTYPES[dtype]
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        start = offset * dt.itemsize
        buf[start:start + len(raw)] = raw
        entries[name] = {"dtype": dtype, "shape": list(arr.shape), "offset": offset}
    return entries, bytes(buf)


def save_model(m: Model) -> tuple:
    """Serialize ``m`` to ``(manifest_bytes, blob_bytes)``."""
    entries, blob = encode_tensors(m.tensors, m.tensor_meta)
    doc = {
        "input_shape": list(m.input_shape),
        "layers": [layer_to_record(l) for l in m.layers],
        "tensors": entries,
    }
    return json.dumps(doc, indent=2).encode("utf-8"), blob


def pack_model(input_shape, layers: list, tensors: dict, dtype: str = "f64") -> tuple:
    """Build manifest and blob bytes from layer records and named arrays."""
    meta, offset = {}, 0
    size = _DTYPES[dtype].itemsize
    for name, arr in tensors.items():
        # keep every tensor 8-byte aligned so f32 and f64 layouts share code
        offset = -(-offset * size // 8) * 8 // size
        meta[name] = TensorMeta(dtype, offset)
        offset += np.asarray(arr).size
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
    entries, blob = encode_tensors(arrays, meta)
    doc = {"input_shape": list(input_shape), "layers": list(layers), "tensors": entries}
    return json.dumps(doc, indent=2).encode("utf-8"), blob


def build_model(input_shape, layers: list, tensors: dict, dtype: str = "f64") -> Model:
    """Convenience: :func:`pack_model` followed by :func:`load_model`."""
    return load_model(*pack_model(input_shape, layers, tensors, dtype))
