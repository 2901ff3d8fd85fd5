"""
Error hierarchy shared by every module.

Each error carries the process exit code the CLI reports for it:
2 configuration/usage, 3 I/O or format, 4 numeric failure.
"""


class KeyTailorError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class ConfigurationError(KeyTailorError):
    """Invalid configuration, flag combination or model hyperparameter."""

    exit_code = 2


class UsageError(ConfigurationError):
    """An operation was called outside its contract (empty inputs, reused graph, ...)."""


class EmptyTargetsError(ConfigurationError):
    """An instruction contained no recognised view or action keyword."""


class DimensionError(KeyTailorError, ValueError):
    """Operand extents do not agree."""

    exit_code = 2


class ShapeError(DimensionError):
    """A tensor does not fit the layout an operation requires."""


class FormatError(KeyTailorError, ValueError):
    """A persisted file is corrupt, truncated or violates its layout."""

    exit_code = 3


class LoadError(FormatError):
    """A checkpoint does not match the configuration it is loaded into."""


class StorageError(KeyTailorError, OSError):
    """A path could not be read or written."""

    exit_code = 3


class NumericError(KeyTailorError, ArithmeticError):
    """Non-finite values or a failed gradient check."""

    exit_code = 4
