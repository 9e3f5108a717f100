"""Exception hierarchy. CLI exit codes key off these classes."""


class RoiMaeError(Exception):
    """Base class for all package errors."""


class DimensionError(RoiMaeError, ValueError):
    pass


class ParameterError(RoiMaeError, ValueError):
    pass


class UsageError(RoiMaeError, RuntimeError):
    pass


class ConfigError(RoiMaeError):
    pass


class DataError(RoiMaeError):
    """Unreadable, malformed or unusable input data."""


class SubjectTooShortError(DataError):
    pass


class CheckpointError(RoiMaeError):
    """Checkpoint file is corrupt, truncated or from another format version."""


class CompatibilityError(CheckpointError):
    pass


class UndefinedMetricError(RoiMaeError, ValueError):
    pass


class LeakageError(RoiMaeError):
    """An outer-test subject reached a training input."""
