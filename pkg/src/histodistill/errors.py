"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or unknown configuration key."""


class DataFormatError(ValueError):
    """Malformed input file; the message names the byte offset or line."""


class UndefinedResultError(ValueError):
    """A statistic has no defined value for the given input."""


class CheckpointError(ValueError):
    """Unreadable or version-incompatible checkpoint."""


class TrainingError(RuntimeError):
    """Training aborted; the message carries epoch and patient context."""
