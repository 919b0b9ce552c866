"""Exception types with a stable mapping onto CLI exit codes."""
from __future__ import annotations


class DerflexError(Exception):
    """Base class for all package errors."""


class ConfigError(DerflexError):
    """Invalid or inconsistent configuration input (exit code 2)."""


class DataError(DerflexError):
    """Missing or malformed data file (exit code 4)."""


class MalformedSignalError(DataError):
    """A regulation-signal file contains an unparseable or out-of-range line."""

    def __init__(self, message: str, line_number: int | None = None):
        super().__init__(message)
        self.line_number = line_number


class InfeasibleError(DerflexError):
    """A requested search or selection has no feasible answer (exit code 3)."""


class SelectionError(InfeasibleError):
    """Representative-hour selection cannot be satisfied by the dataset."""


class CapExceededError(InfeasibleError):
    """Fleet-size search hit its cap before meeting the score threshold.

    Carries the score trajectory gathered so far for diagnosis.
    """

    def __init__(self, message: str, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory if trajectory is not None else []


class UndefinedPrecisionError(DerflexError):
    """Precision is undefined because the reference has no magnitude."""


class UnsupportedDirectionError(DerflexError):
    """A discharge quantity was requested for a device that cannot discharge."""
