"""Shared exception types, mapped to CLI exit codes in cli.py."""


class SchemaError(ValueError):
    """Malformed or inconsistent data/schema (exit code 3)."""


class ConfigError(ValueError):
    """Invalid configuration or arguments (exit code 2)."""


class GraphError(ValueError):
    """Malformed graph or impossible graph operation (exit code 3)."""


class NumericError(RuntimeError):
    """Numerical failure during fitting or scoring (exit code 4)."""
