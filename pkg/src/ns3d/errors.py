"""Typed errors shared across the package, mapped to CLI exit codes."""


class Ns3dError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(Ns3dError):
    """Invalid or inconsistent run configuration."""

    exit_code = 2


class DataError(Ns3dError):
    """Missing, malformed, or mismatched data artifacts."""

    exit_code = 3


class NumericError(Ns3dError):
    """Non-finite values encountered where finiteness is required."""

    exit_code = 4


class CheckpointError(Ns3dError):
    """Incompatible or corrupt checkpoint / token-file contents."""

    exit_code = 5
