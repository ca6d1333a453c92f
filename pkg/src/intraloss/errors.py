"""Exception types raised across the package."""


class IntraLossError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(IntraLossError, ValueError):
    pass


class ZeroNormRow(IntraLossError, ValueError):
    pass


class DomainError(IntraLossError, ValueError):
    pass


class LabelOutOfRange(IntraLossError, ValueError):
    pass


class UnsupportedScheme(IntraLossError, ValueError):
    pass


class EmptyBatch(IntraLossError, ValueError):
    pass


class InvalidSpec(IntraLossError, ValueError):
    pass


class InsufficientData(IntraLossError, ValueError):
    pass


class DegenerateClass(IntraLossError, ValueError):
    pass


class ConfigError(IntraLossError, ValueError):
    pass


class NonFiniteLoss(IntraLossError, FloatingPointError):
    """Training produced a NaN/inf loss; ``iteration`` records where."""

    def __init__(self, iteration, message=None):
        self.iteration = iteration
        super().__init__(message or f"non-finite loss at iteration {iteration}")
