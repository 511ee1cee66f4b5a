"""Exception types shared across the package."""


class ScdkitError(Exception):
    """Base class for all package errors."""


class ShapeError(ScdkitError):
    """Operand shapes do not conform for the requested operation."""


class NumericError(ScdkitError):
    """An operation produced a non-finite value (NaN or Inf)."""


class AutodiffError(ScdkitError):
    """Misuse of the gradient tape (non-scalar loss, repeated backward, detached graph)."""


class FormatError(ScdkitError):
    """A serialized tensor, checkpoint or dataset file is malformed."""


class ConfigError(ScdkitError):
    """Invalid or unknown configuration key / value."""


class DataError(ScdkitError):
    """Dataset is missing, inconsistent or incompatible with the model."""
