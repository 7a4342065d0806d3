"""Exception types raised across the package."""


class GnasError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(GnasError, ValueError):
    pass


class ParentOutOfRange(GnasError, ValueError):
    pass


class SpaceTooLarge(GnasError):
    pass


class DimensionMismatch(GnasError, ValueError):
    pass


class NonFiniteLoss(GnasError, FloatingPointError):
    """Training produced a NaN/inf loss; retry with a smaller learning rate."""


class EmptyDescendants(GnasError, ValueError):
    pass


class BudgetExhausted(GnasError):
    """Search ran out of wall-clock budget.

    The best-so-far state is attached so callers can still use it.
    """

    def __init__(self, message, arch=None, store=None, trace=None):
        super().__init__(message)
        self.arch = arch
        self.store = store
        self.trace = trace


class InfeasibleBaseRate(GnasError):
    pass


class ParseError(GnasError, ValueError):
    def __init__(self, message, row=None, column=None):
        loc = ""
        if row is not None:
            loc = f" (row {row}" + (f", column {column})" if column is not None else ")")
        super().__init__(message + loc)
        self.row = row
        self.column = column


class NonBinaryLabel(ParseError):
    pass


class EmptySplit(GnasError, ValueError):
    pass


class ConfigError(GnasError, ValueError):
    pass
