"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class MarginLabError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(MarginLabError):
    """Invalid or inconsistent run configuration."""


class DataError(MarginLabError):
    """Bad or missing on-disk artifacts (tensors, manifests, datasets)."""


class TensorFormatError(DataError):
    """Malformed portable tensor file."""


class BadMagicError(TensorFormatError):
    """File does not start with the tensor-format magic bytes."""


class TruncatedPayloadError(TensorFormatError):
    """File ends before the declared payload is complete."""


class ExtentOverflowError(TensorFormatError):
    """Declared extents are implausibly large or inconsistent."""


class NumericError(MarginLabError):
    """Numerical failure (divergence, degenerate gradients, non-finite values)."""


class DegenerateDirectionError(NumericError):
    """Gradient difference norm too small to define a boundary direction."""


class SubspaceUnreachableError(NumericError):
    """Decision boundary is unreachable within the constrained subspace."""
