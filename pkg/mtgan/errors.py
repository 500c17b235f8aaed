# errors.py: exception hierarchy shared by every mtgan module
#
# Callers that only know the builtins keep working: shape and input problems
# are ValueErrors, non-finite numbers are ArithmeticErrors.


class MtganError(Exception):
    """Root of every error raised on purpose by mtgan."""


class ShapeError(MtganError, ValueError):
    """Array dimensions do not agree with what an operation requires."""


class InputError(MtganError, ValueError):
    """A precondition on an argument value is violated (empty batch, token out of range, ...)."""


class NumericError(MtganError, ArithmeticError):
    """A computation produced or received non-finite values."""


class SolverError(MtganError):
    """A linear system could not be solved, or a descent invariant broke."""


class DivergenceError(MtganError):
    """A plant state escaped the admissible region; the episode must end."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConfigError(MtganError):
    """A configuration value is malformed or out of range. `field` names the culprit."""

    def __init__(self, message, field=None, line=None):
        super().__init__(message)
        self.field = field
        self.line = line


class CheckpointError(MtganError):
    """A checkpoint container is missing, unreadable or fails its integrity checks."""
