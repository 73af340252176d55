"""Exception types shared across the package.

Every public failure mode raises a subclass of ApptError so callers can
catch package errors with one handler; each class also inherits the
closest builtin so generic code keeps working.
"""


class ApptError(Exception):
    pass


class DimensionError(ApptError, ValueError):
    """Tensor/array shape mismatch; message names the offending shapes."""


class RangeError(ApptError, ValueError):
    """Scalar argument or index outside its documented range."""


class StateError(ApptError, RuntimeError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class NumericError(ApptError, ArithmeticError):
    """Non-finite value where a finite one is required."""


class MissingParameterError(ApptError, KeyError):
    """Parameter name not present in the store."""


class ParseError(ApptError, ValueError):
    """Malformed file content; message carries the 1-based line number."""


class FileFormatError(ApptError, ValueError):
    """Structurally inconsistent file (column counts, magic bytes, ...)."""


class InputError(ApptError, ValueError):
    """Semantically invalid input value (unknown kind, bad labels, ...)."""


class ConfigurationError(ApptError, ValueError):
    """Inconsistent configuration (block/network/training)."""


class TrainingError(ApptError, RuntimeError):
    """Training diverged or could not proceed."""


class UndefinedResultError(ApptError, ArithmeticError):
    """Requested quantity is mathematically undefined for this input."""
