"""Exception types shared across the package."""


class ContragenError(Exception):
    """Base class for all package errors."""


class ValidationError(ContragenError, ValueError):
    """Raised when input data violates a documented precondition."""


class ContractError(ContragenError, ValueError):
    """Raised when an operation is called in a state its contract forbids."""


class ConfigError(ContragenError, ValueError):
    """Raised for invalid, inconsistent, or unknown configuration."""


class DivergenceError(ContragenError, RuntimeError):
    """Raised when training produces a non-finite loss."""
