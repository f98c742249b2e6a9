"""Exception hierarchy shared across the package."""


class RaregenError(Exception):
    """Base class for all package errors."""


class ContractError(RaregenError, ValueError):
    """An argument violated a documented precondition (shape, range, size)."""


class NumericError(RaregenError, ArithmeticError):
    """A computation produced a non-finite value or hit a singularity."""


class SingularMatrixError(NumericError):
    pass


class TrainingError(NumericError):
    def __init__(self, message, iteration=None):
        super().__init__(message if iteration is None else f"{message} (iteration {iteration})")
        self.iteration = iteration


class DegenerateBoundaryError(RaregenError):
    """The penalizing boundary radius collapsed to (near) zero."""


class FormatError(RaregenError, ValueError):
    """A file did not match the expected binary or text layout."""
