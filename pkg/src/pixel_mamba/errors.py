"""Exception hierarchy for Pixel-Mamba.

Every module raises its own narrow subclass of one of two families:

- ValidationError: bad shapes, configs, records or files (CLI exit code 2)
- NumericError: non-finite values or a diverging run (CLI exit code 3)
"""


class PixelMambaError(Exception):
    """Base class for all errors raised by this package."""

    pass


class ValidationError(PixelMambaError):
    """Raised when inputs violate a documented precondition."""

    exit_code = 2


class NumericError(PixelMambaError):
    """Raised when a computation produces NaN or Inf."""

    exit_code = 3


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit code.

    Args:
        error: Exception raised by a command

    Returns:
        2 for validation problems, 3 for numeric failures, 1 otherwise
    """
    return getattr(error, "exit_code", 1)
