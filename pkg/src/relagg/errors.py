"""Exception types shared across the package."""


class RelaggError(Exception):
    """Base class for all errors raised by relagg."""


class DataError(RelaggError, ValueError):
    """Malformed or inconsistent input data."""


class ConfigError(RelaggError, ValueError):
    """Invalid experiment configuration."""


class TrainingError(RelaggError, RuntimeError):
    """Optimisation failed (non-finite loss, failing fold, ...)."""
