"""Exception hierarchy shared by every module.

The CLI maps ``DataError`` to exit status 2 and ``NumericalError`` to 3.
"""


class ChestSepError(Exception):
    """Base class for all package errors."""


class DataError(ChestSepError):
    """Input data is missing, malformed or inconsistent."""


class ShapeError(DataError, ValueError):
    """Array dimensions or block structures disagree."""


class NumericalError(ChestSepError, FloatingPointError):
    """A solver produced a non-finite cost."""
