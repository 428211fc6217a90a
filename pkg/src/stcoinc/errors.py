"""Exception types raised across the package."""


class DomainError(ValueError):
    """Argument outside the physical or geometric domain of an operation."""


class ConfigError(ValueError):
    """Invalid configuration or incompatible analysis settings."""


class EventFileError(ValueError):
    """Malformed event file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class CalibrationError(RuntimeError):
    """Not enough data to build a calibration."""


class FitError(RuntimeError):
    """Least-squares fit failed; ``residual`` holds the last residual norm."""

    def __init__(self, message, residual=None):
        self.residual = residual
        if residual is not None:
            message = f"{message} (residual norm {residual:.6g})"
        super().__init__(message)
