"""Error types shared by the pipeline, mapped to CLI exit codes."""

from __future__ import annotations


class StratMedError(Exception):
    """Base class for every failure the pipeline reports to the user."""

    exit_code = 1
    stage: str | None = None


class ConfigError(StratMedError, ValueError):
    """A configuration value is unknown, malformed, or infeasible."""

    exit_code = 2


class DataError(StratMedError, RuntimeError):
    """Input data could not be read, written, or failed validation."""

    exit_code = 3


class TrainingError(StratMedError, RuntimeError):
    """Model construction, training, or inference failed."""

    exit_code = 4


class NumericsError(TrainingError):
    """An operation produced NaN or infinite values."""


class ShapeError(TrainingError, ValueError):
    """Operands of a tensor operation have incompatible shapes."""


class TapeError(TrainingError):
    """A tape was misused: reused after backward, or given a non-scalar loss."""
