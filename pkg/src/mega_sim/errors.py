"""Exception hierarchy shared by all modules."""


class MegaError(Exception):
    """Base class for all package errors."""


class DomainError(MegaError, ValueError):
    """Input outside the domain of an operation."""


class ResourceError(MegaError):
    """Requested computation exceeds a configured resource cap."""


class NumericError(MegaError, ArithmeticError):
    """An iterative numerical procedure failed to converge."""

    def __init__(self, message, last_distance=None):
        super().__init__(message)
        self.last_distance = last_distance


class FitError(MegaError):
    """Thermal fit could not be performed (empty mask, non-decaying tail, ...)."""


class SignError(FitError):
    """Lesser/greater ratio has the wrong sign inside the fit mask."""
