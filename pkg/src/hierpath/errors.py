"""Exception hierarchy shared across the package."""


class HierPathError(Exception):
    """Base class for all package errors."""


class DimensionError(HierPathError):
    """Shapes or extents are incompatible for the requested operation."""


class UsageError(HierPathError):
    """The caller violated an API precondition."""


class TreeParseError(HierPathError):
    """A tree file is malformed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ScheduleError(HierPathError):
    """A layer schedule violates the increasing-subset constraints."""


class ConfigError(HierPathError):
    """Model or training configuration is inconsistent."""


class DataError(HierPathError):
    """A dataset on disk is missing files or fails validation."""


class NumericError(HierPathError):
    """A computation produced non-finite values."""
