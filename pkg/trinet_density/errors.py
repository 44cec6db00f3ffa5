"""Error taxonomy shared by the library, the batch CLI and the OpenHEXA pipeline.

Every error carries a ``category`` and an ``exit_code`` so the front ends can report a single
machine-parsable line and exit with a stable status.
"""

from __future__ import annotations


class TriNetError(Exception):
    """Base class of all errors raised by the toolkit."""

    category = "runtime"
    exit_code = 1


class CheckFailedError(TriNetError, AssertionError):
    """A verification check measured an error above its threshold.

    ``values`` holds the whole check report so front ends can still print it.
    """

    category = "check"
    exit_code = 1

    def __init__(self, message: str, values: dict[str, object] | None = None):
        self.values = dict(values or {})
        super().__init__(message)


class DataIOError(TriNetError, OSError):
    """An input file is missing or unreadable."""

    category = "io"
    exit_code = 2


class ConfigError(TriNetError, ValueError):
    """Inconsistent run configuration (for instance a resumed model of another size)."""

    category = "config"
    exit_code = 3


class DataFormatError(TriNetError, ValueError):
    """A data file does not follow its declared format."""

    category = "format"
    exit_code = 4

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class ModelFileError(TriNetError, ValueError):
    """A model file has a bad magic, version, header or payload size."""

    category = "format"
    exit_code = 4


class NumericError(TriNetError):
    """Base class of numerical failures."""

    category = "numeric"
    exit_code = 5


class NotInvertibleError(NumericError, ValueError):
    """The target lies outside the range of a bounded (tanh) unit."""

    def __init__(self, message: str, layer: int | None = None, dim: int | None = None):
        self.layer = layer
        self.dim = dim
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)


class ToleranceNotReachedError(NumericError, ArithmeticError):
    """Root finding hit its iteration cap before reaching the tolerance."""

    def __init__(self, message: str, layer: int | None = None, dim: int | None = None):
        self.layer = layer
        self.dim = dim
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)


class DivergenceError(NumericError, FloatingPointError):
    """Non-finite values appeared in a forward pass, a gradient or an update."""


class SampleRejectionError(NumericError, RuntimeError):
    """Too many base draws could not be inverted."""


class NormalizerError(NumericError, ArithmeticError):
    """Covariance stays non positive definite after the maximum ridge."""
