"""Exception types raised across the package."""


class UnstableLabError(Exception):
    """Base class for all package errors."""


class InvalidDimensionError(UnstableLabError, ValueError):
    """State vector too short for the cyclic L96 stencil."""


class ConfigurationError(UnstableLabError, ValueError):
    """Inconsistent or out-of-range configuration."""


class DegeneracyError(UnstableLabError, ArithmeticError):
    """Numerically rank-deficient matrix where full rank is required."""


class ConditioningError(UnstableLabError, ArithmeticError):
    """Linear solve failed or produced non-finite output."""


class ConvergenceError(UnstableLabError, ArithmeticError):
    """Fixed-point iteration did not reach tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual
