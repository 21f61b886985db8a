"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError and OSError
-> 2, NumericError -> 3.
"""


class TlssError(Exception):
    """Base class for all package errors."""


class ConfigError(TlssError):
    """Invalid configuration, spec parameters, or precondition violation."""


class DataError(TlssError):
    """Problems with on-disk artifacts (datasets, checkpoints)."""


class FormatError(DataError):
    """Malformed header or unparseable content."""


class TruncatedError(DataError):
    """File shorter than its header declares."""


class DimensionError(DataError):
    """Shape or dimensionality does not match what was expected."""


class CheckpointError(DataError):
    """Unreadable or inconsistent encoder checkpoint."""


class NumericError(TlssError):
    """Non-finite values encountered during training."""
