"""Exception hierarchy shared across the package."""


class TextMageError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(TextMageError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(TextMageError, ValueError):
    """A configuration value violates its documented constraints."""


class DataError(TextMageError, ValueError):
    """Dataset ingestion or validation failed (manifests, captions, splits)."""


class NumericError(TextMageError, ArithmeticError):
    """A forward computation produced NaN or Inf from finite inputs."""


class CheckpointError(TextMageError, ValueError):
    """A checkpoint file is corrupted, truncated, or of an unknown version."""
