"""Exception types raised across the package."""


class InvalidArgumentError(ValueError):
    """An argument violates the documented precondition of an operation."""


class InvalidStateError(RuntimeError):
    """An object is not in the state an operation requires."""


class UnsupportedOperationError(RuntimeError):
    """A traced loss graph contains a primitive without a usable gradient."""


class DegenerateInputError(ValueError):
    """A point set is too degenerate for the requested computation."""
