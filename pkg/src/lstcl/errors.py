"""Exception hierarchy shared across the package."""


class LSTCLError(Exception):
    """Base class for all package errors."""


class ConfigError(LSTCLError, ValueError):
    """A configuration is invalid or internally inconsistent."""


class SamplingError(LSTCLError):
    """A clip pair cannot be sampled under the requested strategy."""


class ShapeError(LSTCLError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class AttentionError(LSTCLError):
    """An attention row has no admissible key."""


class NumericError(LSTCLError, ArithmeticError):
    """Non-finite values or a degenerate normalisation."""


class ParameterMapError(LSTCLError, KeyError):
    """Two parameter maps do not have matching names or shapes."""


class ProtocolError(LSTCLError):
    """An evaluation protocol cannot be applied to the given input."""
