"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class TaskGraphError(Exception):
    exit_code = 1


class InvalidGeometryError(TaskGraphError, ValueError):
    exit_code = 4


class FormatError(TaskGraphError, ValueError):
    """Malformed file: bad magic, unsupported version, missing fields."""

    exit_code = 4


class DimensionMismatchError(FormatError):
    exit_code = 5


class DanglingReferenceError(FormatError):
    exit_code = 8


class UndefinedStatisticError(TaskGraphError, ValueError):
    exit_code = 7


class EmptySceneError(TaskGraphError, ValueError):
    exit_code = 7


class NoLossError(TaskGraphError, ValueError):
    exit_code = 7


class NonFiniteLossError(TaskGraphError, FloatingPointError):
    exit_code = 6


class ConfigError(TaskGraphError, ValueError):
    exit_code = 2
