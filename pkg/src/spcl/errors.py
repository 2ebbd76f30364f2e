"""Exception types, each mapped to the CLI exit code it produces."""


class SpclError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(SpclError):
    """Invalid configuration, inputs, or operation preconditions."""

    exit_code = 2


class NumericError(SpclError):
    """Non-finite values or failed numeric checks."""

    exit_code = 3


class OracleError(SpclError):
    """Oracle-scale computation failed (factorization, convergence)."""

    exit_code = 4
