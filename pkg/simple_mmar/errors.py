"""Exceptions raised by simple_mmar."""


class MMARError(Exception):
    """Base class for every error raised on purpose by this package."""


class ConfigError(MMARError, ValueError):
    """Invalid configuration value, key or command line flag."""


class DatasetError(MMARError, ValueError):
    """Dataset index or frame files are missing, corrupt or inconsistent."""


class CheckpointError(MMARError, ValueError):
    """Checkpoint cannot be read or does not match the expected model."""


class TrainingError(MMARError, RuntimeError):
    """Optimization diverged or could not continue."""
