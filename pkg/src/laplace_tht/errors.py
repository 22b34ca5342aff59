"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """Raised when an input violates a documented precondition."""


class FactorizationError(RuntimeError):
    """Raised when a sparse or dense factorization fails."""


class ConvergenceError(RuntimeError):
    """Raised when an iterative solve stops before every shift converged.

    The partial result is attached so callers can inspect which shifts failed.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result

    @property
    def unconverged(self):
        if self.result is None:
            return []
        return [int(k) for k in (~self.result.converged).nonzero()[0]]
