"""Exception types shared across the package."""


class BilevelError(Exception):
    """Base class for all package errors."""


class NumericOverflowError(BilevelError):
    """Multiplicative update overflowed; the caller should rescale the step."""


class AssumptionViolationError(BilevelError):
    """The inner Hessian is not positive definite."""


class SingularDesignError(BilevelError):
    """Weighted design matrix is singular (support too small for the rank)."""


class StepTooLargeError(BilevelError):
    """A finite-difference probe left the simplex."""


class NoConvergenceError(BilevelError):
    """An iterative solve exceeded its iteration cap."""


class AbsoluteContinuityError(BilevelError):
    """A test atom does not appear in the training set."""


class PreconditionError(BilevelError):
    """An operation was called on an input violating its stated precondition."""


class DatasetFormatError(BilevelError):
    """A dataset file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.line = line
