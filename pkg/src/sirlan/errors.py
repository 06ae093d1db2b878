"""Exception hierarchy shared by all modules.

The CLI maps :class:`DataError` to exit code 2 and :class:`NumericError`
to exit code 3.
"""


class SirError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(SirError, ValueError):
    pass


class StateError(SirError, RuntimeError):
    pass


class DataError(SirError):
    pass


class InsufficientDataError(DataError):
    pass


class InvalidBoxError(DataError):
    pass


class DegenerateFaceError(DataError):
    pass


class NumericError(SirError, ArithmeticError):
    pass


class SingularFitError(NumericError):
    pass
