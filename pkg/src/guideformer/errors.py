"""Shared exception types."""


class DimensionError(ValueError):
    """Tensor extents do not line up for the requested operation."""


class ConfigurationError(ValueError):
    """A model / plan configuration violates a build-time invariant."""


class ContractError(ValueError):
    """An operation was called outside of its contract."""
