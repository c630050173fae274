"""Exception hierarchy shared across the toolkit.

Every error raised on purpose derives from DiffrxError so the CLI can map
failures to a machine-parsable class name on stderr.
"""


class DiffrxError(Exception):
    """Base class for all diffrx errors."""


class DimensionError(DiffrxError):
    """Operand shapes are incompatible. The message names both shapes."""


class ConfigurationError(DiffrxError):
    """A configuration value is out of its documented range."""


class UsageError(DiffrxError):
    """An API contract was violated (wrong call order, wrong argument kind)."""


class NumericsError(DiffrxError):
    """A numerical procedure failed (singular system, NaN loss, divergence)."""


class MetricError(DiffrxError):
    """A metric is undefined for the given inputs (e.g. zero-power reference)."""


class DataFormatError(DiffrxError):
    """A file or stream does not match its documented binary/CSV layout."""
