class SnoMdpError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(SnoMdpError, ValueError):
    pass


class ParseError(SnoMdpError, ValueError):
    """Malformed input file. ``row``/``column`` are 1-based when known."""

    def __init__(self, message, row=None, column=None, path=None):
        self.row = row
        self.column = column
        self.path = path
        self.message = message
        where = []
        if path is not None:
            where.append(str(path))
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


class CovarianceError(SnoMdpError, ArithmeticError):
    """A covariance matrix could not be factorized even after jitter."""


class NoExpandersError(SnoMdpError):
    """Goal selection was asked to pick from an empty expander set."""


class DisconnectedSafeSetError(SnoMdpError):
    """The target cannot be reached while staying inside the safe set."""


class ConvergenceError(SnoMdpError):
    def __init__(self, message, residual):
        self.residual = residual
        super().__init__(f"{message} (residual {residual:.3g})")


class RunAborted(SnoMdpError):
    """A simulation stopped early. ``log`` holds whatever was recorded."""

    def __init__(self, message, log=None):
        self.log = log
        super().__init__(message)
