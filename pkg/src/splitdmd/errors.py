"""Exception hierarchy shared by all splitdmd modules."""


class SplitDmdError(Exception):
    """Base class for every error raised by this package."""


class DomainError(SplitDmdError, ValueError):
    """An argument lies outside the domain of the operation."""


class ConfigError(SplitDmdError, ValueError):
    """A configuration object violates one of its invariants."""


class ShapeError(SplitDmdError, ValueError):
    """Array shapes are inconsistent with each other or with the operation."""


class RankError(SplitDmdError, ValueError):
    """Requested rank exceeds what the data supports.

    ``achievable`` carries the numerical rank that can be used instead.
    """

    def __init__(self, message, achievable=None):
        super().__init__(message)
        self.achievable = achievable


class IntegrationError(SplitDmdError, RuntimeError):
    """Time integration produced a non-finite state."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class ResolutionError(SplitDmdError, RuntimeError):
    """The spatial grid does not resolve the solution."""


class InitError(SplitDmdError, RuntimeError):
    """Optimization could not start from the supplied initial point."""


class EmptyIntervalError(SplitDmdError, ValueError):
    """A time window contains no snapshot columns."""
