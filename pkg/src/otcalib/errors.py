from typing import Any


class CalibrationError(RuntimeError):
    """Root of the solver failures reported by the command line."""


class ConvergenceError(CalibrationError):
    """`partial` holds the last accepted iterate when the failing solver has one."""

    def __init__(self, message: str, residual: float | None = None, partial: Any = None):
        super().__init__(message if residual is None else f"{message} (last residual {residual:.3e})")
        self.residual = residual
        self.partial = partial


class NumericalError(CalibrationError):
    def __init__(self, message: str, time_index: int | None = None):
        super().__init__(message if time_index is None else f"{message} (time index {time_index})")
        self.time_index = time_index


class ConfigError(ValueError):
    pass


class ImpliedVolError(ValueError):
    pass
