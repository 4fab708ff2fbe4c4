"""Shared exception types."""


class ContractError(ValueError):
    """An operation was called with inputs that violate its preconditions."""


class ShapeError(ContractError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration value or combination of values is invalid."""


class FormatError(ValueError):
    """A serialized artifact carries an unknown or unsupported format tag."""
