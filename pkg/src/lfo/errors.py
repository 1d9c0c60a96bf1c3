"""Exception hierarchy shared by every stage of the pipeline."""


class LfoError(Exception):
    """Base class for all package errors."""


class ShapeError(LfoError, ValueError):
    pass


class NumericError(LfoError, ArithmeticError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ConfigError(LfoError, ValueError):
    pass


class DataError(LfoError, ValueError):
    """Training data is missing, empty, degenerate or too sparse."""


class CoverageError(DataError):
    """A class required by the task is absent from the supplied data."""


class GenerationError(LfoError, RuntimeError):
    pass


class DependencyError(LfoError, FileNotFoundError):
    pass


class FormatError(LfoError, ValueError):
    pass


class VersionError(FormatError):
    pass


class CorruptionError(FormatError):
    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class KindError(FormatError):
    pass
