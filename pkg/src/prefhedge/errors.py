"""Exception types shared across the solver and simulation modules."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class SingularGammaError(DomainError):
    """Risk aversion too close to 1, where the CRRA power form degenerates."""


class DegenerateTimeError(DomainError):
    """A conditional-law operation was requested at the terminal time."""


class PositivityError(RuntimeError):
    """The continuation factor lost positivity (or blew up) during a solve."""

    def __init__(self, message, t=None, y=None, ybar=None):
        super().__init__(message)
        self.t = t
        self.y = y
        self.ybar = ybar


class OutOfGridError(ValueError):
    """A point lies outside the hull of the solved grid."""


class ConvergenceError(RuntimeError):
    """An iterative solve failed to reach its tolerance.

    Carries the iteration history so callers can diagnose stalls.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class ConfigError(ValueError):
    """A run configuration is malformed or violates a parameter invariant."""
