"""Exception hierarchy. Every numerical failure derives from ``NumericalError``."""


class IvopeError(Exception):
    pass


class DataError(IvopeError, ValueError):
    pass


class SpecError(IvopeError, ValueError):
    pass


class NumericalError(IvopeError, ArithmeticError):
    pass


class IvWeakError(NumericalError):
    """|p1A(s) - p0A(s)| fell below the overlap floor at some evaluation point."""

    def __init__(self, message, count=0):
        super().__init__(message)
        self.count = count


class OverlapError(NumericalError):
    pass


class NonConvergenceError(NumericalError):
    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = tuple(history)


class SeparationError(NumericalError):
    pass


class SingularSystemError(NumericalError):
    pass


class CapExceededError(NumericalError):
    pass


class HorizonError(IvopeError, ValueError):
    pass
