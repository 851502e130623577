"""Exception types shared across the toolkit."""


class IcpcError(Exception):
    """Base class for all toolkit errors."""


class InvalidCompressionError(IcpcError, ValueError):
    """A requested compression level does not fit the input or the model."""


class ConfigError(IcpcError, ValueError):
    """A run configuration or augmentation policy is ill-formed."""


class ShapeError(IcpcError, ValueError):
    """An array has dimensions incompatible with the requested operation."""


class NumericError(IcpcError, ArithmeticError):
    """A numeric computation produced NaN or Inf."""


class UnstableMeasurementError(IcpcError, RuntimeError):
    """Wall-clock latency measurements varied too much to be trusted."""


class FormatError(IcpcError, ValueError):
    """A file does not match the expected binary or text layout."""


class VersionError(FormatError):
    """A file was written by an incompatible format version."""
