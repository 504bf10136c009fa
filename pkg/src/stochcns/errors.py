"""Exception hierarchy shared by all modules."""


class StochCNSError(Exception):
    """Base class for package errors."""


class ConfigurationError(StochCNSError, ValueError):
    """Invalid configuration, grid mismatch or violated precondition."""


class PositivityError(StochCNSError):
    """Density at or below the positivity floor where a strictly positive one is needed."""


class SingularOperatorError(PositivityError):
    """The mass operator M[rho] is singular because rho is not positive."""


class SolverError(StochCNSError):
    """Iterative solve failed to reach tolerance within its iteration budget."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
