"""Attribution engine for sequential feed-forward networks.

Typical use::

    model = nnattrib.load_model(manifest_bytes, blob_bytes)
    analyzer = nnattrib.create_analyzer("lrp_epsilon", model, epsilon=1e-3)
    analyzer.fit(train_samples)        # only pattern methods need this
    attribution = analyzer.analyze(x)
"""

from __future__ import annotations

from .analyzers import METHODS, Attribution, MethodConfig, analyze
from .errors import (
    AnalysisError,
    ConfigError,
    ModelError,
    NNAttribError,
    PatternError,
    ShapeChainError,
    ShapeError,
)
from .evaluation import PerturbationConfig, PerturbationCurve, aopc, perturbation_curve
from .forward import NeuronSelector, forward
from .heatmap import HeatmapSpec, render_heatmap
from .model_io import Model, load_model, save_model, validate_model
from .patterns import Patterns, fit_patterns, load_patterns, save_patterns

__version__ = "0.1.0"


class Analyzer:
    """A method bound to a model: optional ``fit`` on data, then ``analyze``."""

    def __init__(self, method: str, model: Model, selector=None, **params):
        if selector is not None:
            params["selector"] = selector
        if isinstance(params.get("inner"), str):
            params["inner"] = MethodConfig(params["inner"])
        self.config = MethodConfig(method, **params)
        self.model = model
        self.patterns = None

    @property
    def needs_fit(self) -> bool:
        inner = self.config.inner.method if self.config.inner is not None else None
        return self.config.method in ("pattern_net", "pattern_attribution") or inner in ("pattern_net", "pattern_attribution")

    def fit(self, samples) -> "Analyzer":
        if self.needs_fit:
            self.patterns = fit_patterns(self.model, samples)
        return self

    def analyze(self, x) -> Attribution:
        return analyze(self.model, x, self.config, self.patterns)


def create_analyzer(method: str, model: Model, **params) -> Analyzer:
    return Analyzer(method, model, **params)


__all__ = [
    "METHODS",
    "AnalysisError",
    "Analyzer",
    "Attribution",
    "ConfigError",
    "HeatmapSpec",
    "MethodConfig",
    "Model",
    "ModelError",
    "NNAttribError",
    "NeuronSelector",
    "PatternError",
    "Patterns",
    "PerturbationConfig",
    "PerturbationCurve",
    "ShapeChainError",
    "ShapeError",
    "analyze",
    "aopc",
    "create_analyzer",
    "fit_patterns",
    "forward",
    "load_model",
    "load_patterns",
    "perturbation_curve",
    "render_heatmap",
    "save_model",
    "save_patterns",
    "validate_model",
]
