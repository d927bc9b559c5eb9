"""Shared exception types, mapped to CLI exit codes in cli.py."""


class ConfigError(ValueError):
    """Invalid model/run configuration (exit code 1)."""


class DataError(ValueError):
    """Malformed or missing input data (exit code 2)."""


class NumericError(RuntimeError):
    """Non-finite value encountered during optimization (exit code 3)."""
