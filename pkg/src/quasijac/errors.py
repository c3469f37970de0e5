"""Exception hierarchy shared by all modules."""


class QuasiJacError(Exception):
    """Base class for package errors."""


class DomainError(QuasiJacError, ValueError):
    """Argument outside the domain of a function."""


class DegenerateDesignError(QuasiJacError):
    """Weighted design is rank deficient beyond the pseudo-inverse tolerance."""


class DegenerateSampleError(QuasiJacError):
    """Too few draws survive on the level set to fit a linear approximation."""

    def __init__(self, message, n_retained=0, required=0):
        super().__init__(message)
        self.n_retained = n_retained
        self.required = required


class ConvergenceError(QuasiJacError):
    """An iterative routine failed; ``best`` carries the best value found, if any."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class ConsistencyError(QuasiJacError):
    """Internal invariant violated (e.g. projection zeros that are not zero)."""


class SingularVarianceError(QuasiJacError):
    """Sandwich variance undefined because the slope matrix is rank deficient."""


class FlooringWarning(UserWarning):
    """Eigenvalues were clamped when inverting a near-singular matrix."""
