"""Exception hierarchy shared by every module."""


class NNAttribError(Exception):
    """Base class for all errors raised by nnattrib."""


class ShapeError(NNAttribError, ValueError):
    pass


class StabilizedDivisionError(NNAttribError, ZeroDivisionError):
    """Raised by checked division when a divisor is exactly zero."""


class ModelError(NNAttribError):
    """Problems with a model manifest, its weight blob or its structure."""


class ManifestParseError(ModelError):
    pass


class BlobTruncationError(ModelError):
    pass


class ShapeChainError(ModelError):
    def __init__(self, layer_index, expected, got):
        self.layer_index = layer_index
        self.expected = tuple(expected)
        self.got = tuple(got)
        super().__init__(
            f"shape chain broken at layer {layer_index}: previous layer outputs "
            f"{list(self.expected)}, layer expects {list(self.got)}"
        )


class ConfigError(NNAttribError, ValueError):
    """Invalid analyzer or perturbation configuration."""


class AnalysisError(NNAttribError):
    pass


class PatternError(AnalysisError):
    """Missing, incomplete or mis-shaped patterns."""
