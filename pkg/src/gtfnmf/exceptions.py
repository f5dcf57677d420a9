"""Exception hierarchy shared by every gtfnmf module."""


class GTFError(Exception):
    """Base class for all errors raised by gtfnmf."""


class ParameterError(GTFError, ValueError):
    """A hyperparameter lies outside its admissible domain."""


class ConfigurationError(GTFError, ValueError):
    """Inconsistent sizes, layouts or options."""


class StabilityError(GTFError, ArithmeticError):
    """A linear-algebra routine met an unstable or singular system."""


class DivergenceError(GTFError, FloatingPointError):
    """An inference recursion produced non-finite values."""

    def __init__(self, message, iteration=None, step=None):
        super().__init__(message)
        self.iteration = iteration
        self.step = step


class DegenerateInputError(GTFError, ValueError):
    """Input data carry no usable information (silent or fully missing)."""


class AudioFormatError(GTFError, ValueError):
    """A WAV file is malformed or uses an unsupported encoding."""


class ResourceError(GTFError, RuntimeError):
    """A requested run exceeds a configured resource cap."""


class InitializationError(GTFError, ValueError):
    """An optimisation could not start from the supplied initial point."""
