"""Shared exception types."""


class ConfigurationError(ValueError):
    """Raised when inputs are structurally inconsistent (shapes, divisibility, ranges)."""


class DegenerateUpdateError(ValueError):
    """Raised when a model update is constant and cannot be normalized to unit variance."""
