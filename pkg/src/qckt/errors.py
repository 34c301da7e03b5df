"""Exception types shared across the package.

Validation-style errors (bad flags, bad config, bad operand domains) subclass
ValueError; failures that surface mid-run (unreadable data, divergence)
subclass RuntimeError.  The CLI maps the first group to exit code 1 and the
second to exit code 2.
"""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """A value is outside the operation's legal domain (e.g. response not 0/1)."""


class ConfigError(ValueError):
    """A configuration value is invalid before any compute starts."""


class DataError(RuntimeError):
    """Input data violates a structural requirement."""


class ParseError(DataError):
    """A data file could not be parsed; carries the offending line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TrainingError(RuntimeError):
    """Optimization failed (non-finite loss or gradient)."""


class MetricError(RuntimeError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""
