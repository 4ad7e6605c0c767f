"""Command line: analyze, fit-patterns, evaluate (and export-zoo for demos).

Exit codes: 0 success, 2 bad flags or configuration, 3 model/file errors,
4 analysis errors. Diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from .analyzers import METHODS, MethodConfig, analyze
from .errors import AnalysisError, ConfigError, ModelError, ShapeError
from .evaluation import PerturbationConfig, curve_json, perturbation_curve
from .forward import NeuronSelector, forward
from .heatmap import render_heatmap
from .model_io import encode_tensors, load_model, load_tensors, parse_manifest, save_model
from .patterns import fit_patterns, load_patterns, save_patterns

EXIT_OK, EXIT_USAGE, EXIT_FILE, EXIT_ANALYSIS = 0, 2, 3, 4

_FLOAT_PARAMS = {"epsilon", "alpha", "beta", "low", "high", "sigma", "baseline"}
_INT_PARAMS = {"steps", "n", "seed"}


class UsageError(Exception):
    pass


class FileProblem(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- files -------------------------------------------------------------------------

def blob_path(manifest_path: str) -> str:
    root, ext = os.path.splitext(manifest_path)
    return root + ".bin" if ext == ".json" else manifest_path + ".bin"


def _read(path: str) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise FileProblem(f"cannot read {path}: {exc.strerror}") from None


def _write(path: str, data: bytes) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise FileProblem(f"cannot write {path}: {exc.strerror}") from None


def write_pair(path: str, manifest: bytes, blob: bytes) -> None:
    _write(path, manifest)
    _write(blob_path(path), blob)


def read_model(args):
    return load_model(_read(args.model), _read(args.weights))


def read_samples(path: str, input_shape) -> tuple:
    """Load samples from inline JSON or a manifest+blob batch.

    Returns ``(samples, batched)`` where ``samples`` is an [N, *input_shape]
    array (N may be 0 for an empty file).
    """
    raw = _read(path)
    input_shape = tuple(input_shape)
    if not raw.strip():
        return np.zeros((0,) + input_shape), True
    doc = parse_manifest(raw)
    if "tensors" in doc:
        tensors, _ = load_tensors(doc, _read(blob_path(path)))
        if not tensors:
            return np.zeros((0,) + input_shape), True
        arr = tensors["data"] if "data" in tensors else next(iter(tensors.values()))
    elif "shape" in doc and "data" in doc:
        shape = tuple(doc["shape"])
        data = doc["data"]
        if math.prod(shape) != len(data):
            raise FileProblem(f"{path}: {len(data)} values cannot have shape {list(shape)}")
        arr = np.asarray(data, dtype=np.float64).reshape(shape)
    else:
        raise FileProblem(f"{path}: expected {{'shape', 'data'}} or a tensor manifest")
    if arr.shape == input_shape:
        return arr[None], False
    if arr.shape[1:] == input_shape:
        return arr, True
    raise FileProblem(f"{path}: data of shape {list(arr.shape)} does not fit model input {list(input_shape)}")


def read_patterns(path: str, model):
    return load_patterns(_read(path), _read(blob_path(path)), model)


# -- parameters ----------------------------------------------------------------------

def parse_params(text: str) -> dict:
    params = {}
    if not text:
        return params
    for item in text.split(","):
        if "=" not in item:
            raise UsageError(f"--param entries must be key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        try:
            if key in _FLOAT_PARAMS:
                params[key] = float(value)
            elif key in _INT_PARAMS:
                params[key] = int(value)
            elif key == "relative_sigma":
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(value)
                params[key] = value.lower() in ("true", "1")
            elif key == "inner":
                params[key] = value
            else:
                raise UsageError(f"unknown parameter {key!r}")
        except ValueError:
            raise UsageError(f"bad value for {key}: {value!r}") from None
    return params


def make_config(method: str, param_text: str, select: str, seed) -> MethodConfig:
    params = parse_params(param_text)
    try:
        selector = NeuronSelector.parse(select)
    except ValueError:
        raise UsageError(f"--select must be 'max' or a unit index, got {select!r}") from None
    if "inner" in params:
        params["inner"] = MethodConfig(params["inner"], selector=selector)
    if seed is not None:
        params["seed"] = seed
    return MethodConfig(method, selector=selector, **params)


def parse_region(text: str) -> tuple:
    parts = text.lower().split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise UsageError(f"--region must be R or RxC, got {text!r}") from None
    if len(dims) == 1:
        dims = (1, dims[0])
    if len(dims) != 2 or min(dims) < 1:
        raise UsageError(f"--region must be R or RxC with positive sizes, got {text!r}")
    return dims


def parse_value(text: str):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"--value must be a number or comma-separated per-channel numbers, got {text!r}") from None
    return vals[0] if len(vals) == 1 else tuple(vals)


# -- commands ----------------------------------------------------------------------------

def attribution_doc(values: np.ndarray, cfg: MethodConfig, units: list, metadata: list, batched: bool) -> dict:
    return {
        "shape": list(values.shape),
        "data": values.ravel().tolist(),
        "method": cfg.describe(),
        "selected_unit": units if batched else units[0],
        "metadata": metadata if batched else metadata[0],
    }


def cmd_analyze(args) -> int:
    model = read_model(args)
    samples, batched = read_samples(args.input, model.input_shape)
    if len(samples) == 0:
        raise AnalysisError("no samples in input")
    cfg = make_config(args.method, args.param, args.select, args.seed)
    patterns = read_patterns(args.patterns, model) if args.patterns else None
    results = [analyze(model, x, cfg, patterns) for x in samples]
    values = np.stack([r.values for r in results]) if batched else results[0].values
    units = [r.selected_unit for r in results]
    meta = [r.metadata for r in results]
    doc = attribution_doc(values, cfg, units, meta, batched)
    if args.format == "blob":
        if not args.out:
            raise UsageError("--format blob needs --out")
        entries, blob = encode_tensors({"attribution": values})
        manifest = {k: v for k, v in doc.items() if k not in ("shape", "data")}
        manifest["tensors"] = entries
        write_pair(args.out, json.dumps(manifest, indent=2).encode("utf-8"), blob)
    else:
        text = (json.dumps(doc) + "\n").encode("utf-8")
        if args.out:
            _write(args.out, text)
        else:
            sys.stdout.write(text.decode("utf-8"))
    if args.heatmap:
        for i, r in enumerate(results):
            path = args.heatmap
            if len(results) > 1:
                root, ext = os.path.splitext(path)
                path = f"{root}_{i}{ext}"
            _write(path, render_heatmap(r))
    return EXIT_OK


def cmd_fit_patterns(args) -> int:
    model = read_model(args)
    samples, _ = read_samples(args.data, model.input_shape)
    if len(samples) == 0:
        raise AnalysisError("no samples in data file")
    patterns = fit_patterns(model, samples)
    write_pair(args.out, *save_patterns(patterns))
    for i in model.linear_layers():
        units = model.weight(i).shape[1] if model.layers[i].kind == "dense" else model.layers[i].out_channels
        print(f"layer {i} ({model.layers[i].kind}, {patterns.regimes[i]} regime): "
              f"{len(patterns.degenerate[i])}/{units} degenerate units")
    return EXIT_OK


def read_attribution(path: str, shape) -> tuple:
    doc = parse_manifest(_read(path))
    if "tensors" in doc:
        tensors, _ = load_tensors(doc, _read(blob_path(path)))
        values = tensors["attribution"]
    else:
        values = np.asarray(doc["data"], dtype=np.float64).reshape(doc["shape"])
    units = doc.get("selected_unit")
    method = doc.get("method", {}).get("method", "attribution")
    if values.shape == tuple(shape):
        values, units = values[None], [units]
    elif not isinstance(units, list):
        units = [units] * len(values)
    return values, units, method


def cmd_evaluate(args) -> int:
    model = read_model(args)
    samples, _ = read_samples(args.input, model.input_shape)
    if len(samples) == 0:
        raise AnalysisError("no samples in input")
    if bool(args.method) == bool(args.attribution):
        raise UsageError("give exactly one of --method or --attribution")
    order = {"desc": "descending", "random": "random"}[args.order]
    seed = args.seed if args.seed is not None else 0
    pcfg = PerturbationConfig(steps=args.steps, region=parse_region(args.region), value=parse_value(args.value),
                              order=order, seed=seed)
    random_cfg = PerturbationConfig(steps=pcfg.steps, region=pcfg.region, value=pcfg.value, order="random", seed=seed)
    records, summary = [], {}
    if args.attribution:
        values, units, name = read_attribution(args.attribution, model.input_shape)
        if len(values) != len(samples):
            raise FileProblem("attribution count does not match input count")
        jobs = [(name, pcfg, lambda i, x: _Given(values[i], units[i]))]
    else:
        jobs = []
        for name in args.method.split(","):
            if name == "random":
                jobs.append(("random", random_cfg, lambda i, x: _Given(np.zeros_like(x), None)))
            else:
                cfg = make_config(name, args.param, args.select, seed)
                patterns = read_patterns(args.patterns, model) if args.patterns else None
                jobs.append((name, pcfg, lambda i, x, cfg=cfg, p=patterns: analyze(model, x, cfg, p)))
    for name, cfg, attribute in jobs:
        scores = []
        for i, x in enumerate(samples):
            curve = perturbation_curve(model, x, attribute(i, x), cfg)
            rec = curve.to_record(name, cfg)
            rec["input_index"] = i
            records.append(rec)
            scores.append(curve.aopc)
        summary[name] = math.fsum(scores) / len(scores)
    if args.out:
        _write(args.out, curve_json(records))
    width = max(len(n) for n in summary)
    print(f"{'method'.ljust(width)}  mean_aopc")
    for name, value in summary.items():
        print(f"{name.ljust(width)}  {value:.6g}")
    return EXIT_OK


class _Given:
    """Precomputed attribution values with an optional fixed unit."""

    def __init__(self, values, unit):
        self.values = values
        self.selected_unit = unit


def cmd_export_zoo(args) -> int:
    from . import zoo

    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed or 0)
    for name, model in zoo.zoo(bias=not args.bias_free).items():
        manifest, blob = save_model(model)
        _write(os.path.join(args.out, f"{name}.json"), manifest)
        _write(os.path.join(args.out, f"{name}.bin"), blob)
        x = rng.uniform(0.0, 1.0, model.input_shape)
        sample = {"shape": list(x.shape), "data": x.ravel().tolist()}
        _write(os.path.join(args.out, f"{name}_input.json"), json.dumps(sample).encode("utf-8"))
        batch = rng.uniform(0.0, 1.0, (args.samples,) + model.input_shape)
        entries, data = encode_tensors({"data": batch})
        write_pair(os.path.join(args.out, f"{name}_data.json"), json.dumps({"tensors": entries}).encode("utf-8"), data)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nnattrib", description="Attribution analysis for sequential neural networks.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def model_flags(sp):
        sp.add_argument("--model", required=True, help="model manifest (JSON)")
        sp.add_argument("--weights", required=True, help="raw little-endian weight blob")

    a = sub.add_parser("analyze", help="compute an attribution")
    model_flags(a)
    a.add_argument("--input", required=True)
    a.add_argument("--method", required=True, choices=METHODS)
    a.add_argument("--param", default="", help="k=v,... method parameters")
    a.add_argument("--select", default="max", help="'max' or an output unit index")
    a.add_argument("--patterns")
    a.add_argument("--out")
    a.add_argument("--format", choices=("json", "blob"), default="json")
    a.add_argument("--heatmap")
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_analyze)

    f = sub.add_parser("fit-patterns", help="fit PatternNet/PatternAttribution patterns")
    model_flags(f)
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit_patterns)

    e = sub.add_parser("evaluate", help="perturbation analysis / AOPC")
    model_flags(e)
    e.add_argument("--input", required=True)
    e.add_argument("--method", help="method name(s), comma separated; 'random' is the random-order baseline")
    e.add_argument("--attribution")
    e.add_argument("--param", default="")
    e.add_argument("--select", default="max")
    e.add_argument("--patterns")
    e.add_argument("--region", default="1")
    e.add_argument("--steps", type=int, required=True)
    e.add_argument("--value", default="0")
    e.add_argument("--order", choices=("desc", "random"), default="desc")
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    z = sub.add_parser("export-zoo", help="write the reference models and sample inputs")
    z.add_argument("--out", required=True)
    z.add_argument("--samples", type=int, default=100)
    z.add_argument("--seed", type=int)
    z.add_argument("--bias-free", action="store_true")
    z.set_defaults(func=cmd_export_zoo)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileProblem, ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FILE
    except (AnalysisError, ShapeError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS


if __name__ == "__main__":
    sys.exit(main())
