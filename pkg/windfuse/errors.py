"""Exception hierarchy for windfuse.

Every error message names the offending field, row, class, component or
epoch so that the CLI can print it as-is.
"""


class WindfuseError(Exception):
    """Base class for all windfuse errors."""


class DataError(WindfuseError, ValueError):
    """Input data violates a precondition (bad CSV, degenerate labels...)."""


class ModelError(WindfuseError):
    """A model component is missing, unfitted or diverged."""


class UsageError(WindfuseError):
    """Invalid command line or configuration."""
