"""Shared exception types.

The command line maps these onto exit codes (see ``cli_runner.cli``):
configuration problems exit 2, data problems exit 3, anything else 4.
"""


class AuditError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(AuditError):
    """Bad configuration value, size, or argument."""


class DataError(AuditError):
    """Dataset or checkpoint file cannot be parsed or validated."""


class ShapeError(AuditError):
    """Array, parameter, or feature dimensions do not match."""


class InvalidInputError(AuditError):
    """Numeric input is non-finite or otherwise unusable."""


class TrainingError(AuditError):
    """Model or attacker training cannot proceed or diverged."""


class EvaluationError(AuditError):
    """Score set cannot support the requested metric."""
