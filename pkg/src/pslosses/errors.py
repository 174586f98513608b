"""Exception hierarchy.

Every error raised on purpose by the library derives from :class:`PSLossError`
so that the CLI can map failures to exit codes.
"""


class PSLossError(Exception):
    pass


class DimensionError(PSLossError, ValueError):
    """Label count of two inputs disagrees."""


class ParameterError(PSLossError, ValueError):
    """A configuration value is outside its admissible range."""


class DomainError(PSLossError, ValueError):
    """A score lies outside the domain of the loss that consumes it."""


class TooManyLabelsError(PSLossError, ValueError):
    """Subset enumeration was requested for more observed labels than the cap."""


class UnsupportedGradientError(PSLossError, TypeError):
    pass


class DataFormatError(PSLossError, ValueError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DivergenceError(PSLossError, ArithmeticError):
    """Training produced a non-finite or runaway loss."""
