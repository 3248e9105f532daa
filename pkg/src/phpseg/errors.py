"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: stain matrix, thresholds, hyperparameters."""


class DataError(Exception):
    """Unusable input data (unreadable tiles, malformed tables)."""


class ManifestError(DataError, ValueError):
    """Malformed manifest or table file; the message carries the line number."""
