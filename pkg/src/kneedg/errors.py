"""Exception types shared across the package."""


class KneedgError(Exception):
    """Base class for all package errors."""


class DimensionError(KneedgError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ContractError(KneedgError, ValueError):
    """A caller violated a documented precondition."""


class ConfigurationError(KneedgError, ValueError):
    """A configuration value is invalid or inconsistent."""


class DataFormatError(KneedgError, ValueError):
    """A file on disk does not match its declared format."""
