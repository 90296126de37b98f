"""Exception hierarchy. Every error carries a short machine-readable code."""


class SpeedRLError(Exception):
    code = "ERROR"


class ConfigError(SpeedRLError, ValueError):
    code = "CONFIG"


class InputError(SpeedRLError, ValueError):
    code = "INPUT"


class NumericalError(SpeedRLError, ArithmeticError):
    code = "NUMERICAL"


class DivergenceError(NumericalError):
    """Raised when training produces a non-finite loss or update."""

    code = "DIVERGED"

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class FormatError(SpeedRLError, ValueError):
    code = "FORMAT"


class UsageError(SpeedRLError, ValueError):
    code = "USAGE"


class ReadError(SpeedRLError, OSError):
    code = "IO"
