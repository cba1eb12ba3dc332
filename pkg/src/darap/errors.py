"""Exception hierarchy. Each leaf maps onto one CLI exit code."""


class DarapError(Exception):
    exit_code = 1


class DataError(DarapError, ValueError):
    """Bad input data: malformed files, wrong shapes, invalid meshes."""

    exit_code = 2


class ObjParseError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericalError(DarapError, ArithmeticError):
    """Solver or decomposition failure."""

    exit_code = 3


class FactorizationError(NumericalError):
    def __init__(self, message, smallest_pivot=None):
        if smallest_pivot is not None:
            message = f"{message} (smallest pivot {smallest_pivot:.3e})"
        super().__init__(message)
        self.smallest_pivot = smallest_pivot


class MissingCacheError(DarapError, RuntimeError):
    exit_code = 3


class GuidanceError(DarapError, RuntimeError):
    """A gradient source failed. Carries the epoch and the source name."""

    exit_code = 4

    def __init__(self, message, epoch=None, source=None):
        where = []
        if source is not None:
            where.append(f"source {source!r}")
        if epoch is not None:
            where.append(f"epoch {epoch}")
        if where:
            message = f"{message} [{', '.join(where)}]"
        super().__init__(message)
        self.epoch = epoch
        self.source = source
