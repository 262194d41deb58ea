"""Exception types shared across the package.

The CLI maps ``UsageError`` subclasses to exit code 1 and anything else
to exit code 2, so raising the right class here is part of the contract.
"""


class PllferError(Exception):
    """Base class for all package errors."""


class UsageError(PllferError):
    """A problem caused by bad inputs or configuration (CLI exit 1)."""


class ConfigurationError(UsageError):
    """Invalid configuration value (bad ratio, negative weight, ...)."""


class ValidationError(UsageError):
    """Runtime data failed a contract check (shape, simplex, bounds)."""


class SchemaError(UsageError):
    """A file's content violates its documented schema."""


class DataLoadError(UsageError):
    """A referenced data file is missing or unreadable."""


class StoreLookupError(UsageError):
    """Confidence store addressed with an unknown sample id."""


class CheckpointError(UsageError):
    """Checkpoint missing, corrupt, or incompatible with the config."""


class NumericError(PllferError):
    """Non-finite values or other numeric failures (CLI exit 2)."""
