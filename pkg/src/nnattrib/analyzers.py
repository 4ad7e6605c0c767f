"""Attribution methods.

Every method is a fold over the reversed tape: select an output unit, seed a
one-hot signal there and let each layer's rule map the signal from its output
back to its input. Methods differ only in the rule table and the seed. The
composite methods (integrated gradients, input times gradient, smoothing) are
built on top of the plain gradient / inner analyses.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rules as R
from .errors import AnalysisError, ConfigError, PatternError, ShapeError
from .forward import NeuronSelector, Tape, forward, select_neuron
from .model_io import Model

METHODS = (
    "gradient",
    "deconvnet",
    "guided_backprop",
    "input_t_gradient",
    "lrp_z",
    "lrp_epsilon",
    "lrp_alphabeta",
    "deep_taylor",
    "integrated_gradients",
    "smoothgrad",
    "pattern_net",
    "pattern_attribution",
)
RELEVANCE_METHODS = ("lrp_z", "lrp_epsilon", "lrp_alphabeta", "deep_taylor", "pattern_attribution")
PATTERN_METHODS = ("pattern_net", "pattern_attribution")


@dataclass(frozen=True)
class MethodConfig:
    """Method name plus its parameters. Unused parameters are ignored."""

    method: str
    epsilon: float = 1e-6
    alpha: float = 1.0
    beta: float = 0.0
    low: object = 0.0
    high: object = 1.0
    baseline: object = None
    steps: int = 64
    sigma: float = 0.15
    n: int = 16
    seed: int = 0
    relative_sigma: bool = True
    inner: Optional["MethodConfig"] = None
    selector: NeuronSelector = field(default_factory=NeuronSelector)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if not isinstance(self.selector, NeuronSelector):
            try:
                object.__setattr__(self, "selector", NeuronSelector.parse(str(self.selector)))
            except ValueError:
                raise ConfigError(f"neuron selector must be 'max' or an index, got {self.selector!r}") from None
        if self.method == "lrp_alphabeta":
            if abs(self.alpha - self.beta - 1.0) > 1e-12:
                raise ConfigError(f"lrp_alphabeta needs alpha - beta = 1, got alpha={self.alpha}, beta={self.beta}")
            if self.alpha < 1.0:
                raise ConfigError(f"lrp_alphabeta needs alpha >= 1, got {self.alpha}")
        if self.method == "lrp_epsilon" and self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.method == "deep_taylor" and np.any(np.asarray(self.low) >= np.asarray(self.high)):
            raise ConfigError("deep_taylor needs low < high")
        if self.method == "integrated_gradients" and (int(self.steps) != self.steps or self.steps < 1):
            raise ConfigError(f"integrated_gradients needs steps >= 1, got {self.steps}")
        if self.method == "smoothgrad":
            if self.sigma < 0:
                raise ConfigError("smoothgrad needs sigma >= 0")
            if self.n < 1:
                raise ConfigError("smoothgrad needs n >= 1")
            inner = self.inner or MethodConfig("gradient")
            if inner.method == "smoothgrad":
                raise ConfigError("smoothgrad cannot wrap another smoothgrad")
            object.__setattr__(self, "inner", inner)

    @property
    def relevance(self) -> bool:
        return self.method in RELEVANCE_METHODS

    def with_selector(self, selector: NeuronSelector) -> "MethodConfig":
        return dataclasses.replace(self, selector=selector)

    def describe(self) -> dict:
        """JSON-friendly summary of the parameters that matter for this method."""
        d = {"method": self.method}
        keys = {
            "lrp_epsilon": ("epsilon",),
            "lrp_alphabeta": ("alpha", "beta"),
            "deep_taylor": ("low", "high"),
            "integrated_gradients": ("steps",),
            "smoothgrad": ("sigma", "n", "seed", "relative_sigma"),
        }.get(self.method, ())
        for k in keys:
            v = getattr(self, k)
            d[k] = np.asarray(v).tolist() if isinstance(v, np.ndarray) else v
        if self.method == "smoothgrad":
            d["inner"] = self.inner.describe()
        d["selector"] = self.selector.mode if self.selector.mode == "max" else self.selector.index
        return d


@dataclass
class Attribution:
    values: np.ndarray
    method: MethodConfig
    selected_unit: int
    metadata: dict = field(default_factory=dict)


@dataclass
class RuleContext:
    model: Model
    cfg: MethodConfig
    patterns: object = None
    first_linear: int = -1

    def pattern(self, i: int) -> np.ndarray:
        arrays = getattr(self.patterns, "arrays", None)
        if arrays is None or i not in arrays:
            raise PatternError(f"patterns required: no pattern for layer {i}")
        return arrays[i]

    def bounds_for(self, shape) -> tuple:
        out = []
        for v in (self.cfg.low, self.cfg.high):
            a = np.asarray(v, dtype=np.float64)
            if a.ndim == 0:
                out.append(np.full(shape, float(a)))
            elif a.size == int(np.prod(shape)):
                out.append(a.reshape(shape))
            else:
                raise ConfigError(f"deep_taylor bounds of shape {list(a.shape)} do not fit layer input {list(shape)}")
        return tuple(out)


def rules_for(method: str, cfg: MethodConfig) -> dict:
    if method in ("gradient", "input_t_gradient", "integrated_gradients"):
        return R.gradient_rules("gradient")
    if method == "deconvnet":
        return R.gradient_rules("deconvnet")
    if method == "guided_backprop":
        return R.gradient_rules("guided")
    if method == "lrp_z":
        return R.lrp_rules("z")
    if method == "lrp_epsilon":
        return R.lrp_rules("epsilon", epsilon=cfg.epsilon)
    if method == "lrp_alphabeta":
        return R.lrp_rules("alphabeta", alpha=cfg.alpha, beta=cfg.beta)
    if method == "deep_taylor":
        return R.deep_taylor_rules()
    if method == "pattern_net":
        return R.pattern_rules("net")
    if method == "pattern_attribution":
        return R.pattern_rules("attribution")
    raise ConfigError(f"{method} has no rule table")


def propagate(m: Model, tape: Tape, seed: np.ndarray, rules: dict, ctx: RuleContext, trace: Optional[list] = None) -> np.ndarray:
    """Fold ``rules`` over the reversed tape, starting from the logit layer.

    If ``trace`` is given, ``(layer_index, signal_at_layer_input)`` pairs are
    appended to it in backward order.
    """
    signal = seed
    for i in range(m.logit_layer(), -1, -1):
        entry = tape[i]
        kind = m.layers[i].kind
        try:
            rule = rules[kind]
        except KeyError:
            raise AnalysisError(f"no backward rule for layer {i} ({kind})") from None
        signal = rule(ctx, entry, signal)
        if trace is not None:
            trace.append((i, signal))
    return signal


def _check_patterns(m: Model, patterns) -> None:
    if patterns is None:
        raise PatternError("patterns required for pattern_net / pattern_attribution")
    missing = [i for i in m.linear_layers() if i not in patterns.arrays]
    if missing:
        raise PatternError(f"patterns required: none fitted for layers {missing}")


def backward_analysis(m: Model, x, cfg: MethodConfig, patterns=None, unit: Optional[int] = None, trace=None) -> Attribution:
    """Single reverse pass of ``cfg.method``; ``unit`` overrides the selector."""
    logits, tape = forward(m, x)
    sel = cfg.selector if unit is None else NeuronSelector("index", unit)
    k, seed = select_neuron(logits, sel, relevance=cfg.relevance)
    linear = m.linear_layers()
    ctx = RuleContext(m, cfg, patterns, linear[0] if linear else -1)
    values = propagate(m, tape, seed, rules_for(cfg.method, cfg), ctx, trace)
    return Attribution(values, cfg, k, {"logit": float(logits[k])})


def gradient(m: Model, x, unit: int) -> np.ndarray:
    return backward_analysis(m, x, MethodConfig("gradient"), unit=unit).values


def input_t_gradient(m: Model, x, selector: NeuronSelector = NeuronSelector()) -> Attribution:
    x = np.asarray(x, dtype=np.float64)
    cfg = MethodConfig("input_t_gradient", selector=selector)
    g = backward_analysis(m, x, cfg)
    g.values = x * g.values
    return g


def integrated_gradients(m: Model, x, baseline=None, steps: int = 64, selector: NeuronSelector = NeuronSelector()) -> Attribution:
    """Path integral of gradients from ``baseline`` to ``x`` by the midpoint rule."""
    x = np.asarray(x, dtype=np.float64)
    cfg = MethodConfig("integrated_gradients", baseline=baseline, steps=steps, selector=selector)
    meta = {"baseline": "zero" if baseline is None else "given"}
    if baseline is None:
        baseline = np.zeros_like(x)
    elif np.ndim(baseline) == 0:
        baseline = np.full_like(x, float(baseline))
    else:
        baseline = np.asarray(baseline, dtype=np.float64)
    if baseline.shape != x.shape:
        raise ShapeError(f"baseline shape {list(baseline.shape)} does not match input {list(x.shape)}")
    logits, _ = forward(m, x)
    k, _ = select_neuron(logits, selector)
    diff = x - baseline
    total = np.zeros_like(x)
    for t in range(1, steps + 1):
        a = (t - 0.5) / steps
        total += gradient(m, baseline + a * diff, k)
    meta["logit"] = float(logits[k])
    return Attribution(diff * (total / steps), cfg, k, meta)


def smooth_aggregate(inner: MethodConfig, m: Model, x, sigma: float, n: int, seed: int,
                     relative_sigma: bool = False, patterns=None) -> Attribution:
    """Average ``inner`` over ``n`` Gaussian-perturbed copies of ``x``.

    The unit is selected once on the clean input and kept for every copy.
    """
    x = np.asarray(x, dtype=np.float64)
    cfg = MethodConfig("smoothgrad", inner=inner, sigma=sigma, n=n, seed=seed,
                       relative_sigma=relative_sigma, selector=inner.selector)
    if sigma == 0:
        a = analyze(m, x, inner, patterns)
        return Attribution(a.values, cfg, a.selected_unit, dict(a.metadata, noise_scale=0.0))
    logits, _ = forward(m, x)
    k, _ = select_neuron(logits, inner.selector)
    fixed = inner.with_selector(NeuronSelector("index", k))
    scale = sigma * float(x.max() - x.min()) if relative_sigma else sigma
    rng = np.random.default_rng(seed)
    acc = np.zeros_like(x)
    for _ in range(n):
        noisy = x + scale * rng.standard_normal(x.shape)
        acc += analyze(m, noisy, fixed, patterns).values
    return Attribution(acc / n, cfg, k, {"logit": float(logits[k]), "noise_scale": scale})


def analyze(m: Model, x, cfg: MethodConfig, patterns=None) -> Attribution:
    """Attribution of the selected output unit of ``m`` at ``x`` under ``cfg``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != m.input_shape:
        raise ShapeError(f"input shape {list(x.shape)} does not match model input {list(m.input_shape)}")
    method = cfg.method
    if method in PATTERN_METHODS:
        _check_patterns(m, patterns)
    if method == "smoothgrad":
        if cfg.inner.method in PATTERN_METHODS:
            _check_patterns(m, patterns)
        inner = cfg.inner.with_selector(cfg.selector)
        out = smooth_aggregate(inner, m, x, cfg.sigma, cfg.n, cfg.seed, cfg.relative_sigma, patterns)
        out.method = cfg
        return out
    if method == "integrated_gradients":
        out = integrated_gradients(m, x, cfg.baseline, int(cfg.steps), cfg.selector)
        out.method = cfg
        return out
    if method == "input_t_gradient":
        return input_t_gradient(m, x, cfg.selector)
    out = backward_analysis(m, x, cfg, patterns)
    if not np.all(np.isfinite(out.values)):
        raise AnalysisError(f"{method} produced non-finite attributions")
    return out
