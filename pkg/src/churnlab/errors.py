"""Exception types shared across the package."""


class ChurnLabError(Exception):
    pass


class ConfigurationError(ChurnLabError, ValueError):
    """Invalid or inconsistent configuration, raised before any compute."""


class DimensionError(ChurnLabError, ValueError):
    pass


class InputError(ChurnLabError, ValueError):
    pass


class NumericError(ChurnLabError, ArithmeticError):
    pass


class StateError(ChurnLabError, RuntimeError):
    pass


class FormatError(ChurnLabError, ValueError):
    pass


class LengthError(ChurnLabError, ValueError):
    pass


class UsageError(ChurnLabError, RuntimeError):
    pass


class EndOfSequence(ChurnLabError):
    """The global step has run past the end of the task sequence."""
