"""Error hierarchy shared by the library, the pipeline and the CLI.

Each error carries the process exit code the CLI reports for it.
"""


class BaconError(Exception):
    """Base class for all BaCon failures."""

    exit_code: int = 1


class ConfigError(BaconError, ValueError):
    """Invalid or incomplete run configuration."""

    exit_code = 2


class DataError(BaconError, ValueError):
    """Malformed input data or inconsistent artifacts."""

    exit_code = 3


class NumericError(BaconError, ArithmeticError):
    """A numeric routine could not produce a valid value."""

    exit_code = 4


# Temporal needs the type names to mark these as non-retryable.
NON_RETRYABLE_ERROR_TYPES = ["ConfigError", "DataError", "NumericError"]
