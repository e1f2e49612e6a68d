"""Exception hierarchy shared across the package."""


class WarpcostError(Exception):
    """Base class for all package errors."""


class FormatError(WarpcostError):
    """Malformed file content (bad magic, truncated payload, bad header)."""


class DimensionMismatchError(WarpcostError):
    """Inputs that must agree in shape do not."""


class FitError(WarpcostError):
    """Model fitting failed (empty or degenerate data, diverged search)."""


class ConfigError(WarpcostError):
    """Invalid configuration value or unknown configuration key."""
