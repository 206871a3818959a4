"""Exception hierarchy shared by every module.

All errors derive from ``ValueError`` so callers that only care about
"bad input" can catch that; the CLI maps the subclasses onto exit codes.
"""


class SignalError(ValueError):
    """Base class for package errors."""


class ParseError(SignalError):
    """A row of input text could not be parsed."""

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class ValidationError(SignalError):
    """Input parsed but violates a data invariant."""

    def __init__(self, message, rows=()):
        self.rows = tuple(rows)
        super().__init__(message)


class InsufficientDataError(SignalError):
    pass


class DomainError(SignalError):
    """Argument outside the mathematical domain of the operation."""


class ConfigError(SignalError):
    pass


class NumericalError(SignalError, ArithmeticError):
    """Singular matrices, non-finite likelihoods and similar failures."""

    def __init__(self, message, step=None, trace=None):
        self.step = step
        self.trace = trace
        super().__init__(message)


class DegenerateSampleError(NumericalError):
    """Zero-variance or otherwise degenerate data."""


class ConvergenceError(NumericalError):
    """Optimizer ran out of budget; ``best`` holds the best-so-far result."""

    def __init__(self, message, best=None):
        self.best = best
        super().__init__(message)
