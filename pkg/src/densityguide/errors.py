"""Exception hierarchy shared across the package."""


class DensityGuideError(Exception):
    """Base class for all package errors."""


class DomainError(DensityGuideError, ValueError):
    """An argument lies outside the domain where the quantity is defined."""


class UndefinedDensityError(DomainError):
    """The density is not defined at the query (e.g. point masses at t=0)."""


class DegenerateScoreError(DensityGuideError, ArithmeticError):
    """The score (or another direction vector) vanishes where a nonzero one is required.

    ``where`` carries the offending (t, x) when known.
    """

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class UnsupportedCapabilityError(DensityGuideError, NotImplementedError):
    """A field was asked for a derivative it cannot provide."""


class IntegrationError(DensityGuideError, ArithmeticError):
    """A non-finite value appeared during integration.

    ``trajectory`` holds the nodes up to and including the last finite one.
    """

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class ConfigError(DensityGuideError, ValueError):
    """An experiment configuration failed validation."""
