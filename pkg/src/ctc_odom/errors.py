"""Exception hierarchy shared across the package."""


class CtcOdomError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(CtcOdomError, ValueError):
    """An argument violates a documented precondition."""


class NearSingularityError(CtcOdomError, ArithmeticError):
    """Rotation angle too close to pi for a well-defined logarithm."""


class ConfigurationError(CtcOdomError):
    """A run configuration is inconsistent or references missing data."""


class ParseError(CtcOdomError, ValueError):
    """A data file does not match its grammar; message carries the line."""


class DuplicateKeyError(ParseError):
    """The same frame pair occurs more than once in an input file."""
