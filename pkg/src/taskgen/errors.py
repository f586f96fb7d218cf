"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class TaskgenError(Exception):
    """Base class for all errors raised by taskgen."""


class SampleParseError(TaskgenError, ValueError):
    """Raised when an embedding file cannot be parsed."""


class EmptyInputError(SampleParseError):
    pass


class MalformedRowError(SampleParseError):
    pass


class InconsistentWidthError(SampleParseError):
    pass


class NonFiniteValueError(SampleParseError):
    pass


class InvalidInputError(TaskgenError, ValueError):
    """Input violates a precondition (dimension mismatch, too few classes, ...)."""


class NumericalError(TaskgenError, ArithmeticError):
    """The optimizer produced a non-finite objective."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration
