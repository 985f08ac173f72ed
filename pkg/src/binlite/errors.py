"""Exception hierarchy shared by every binlite module."""


class BinliteError(Exception):
    """Base class for all binlite errors."""


class ShapeError(BinliteError, ValueError):
    pass


class ConfigurationError(BinliteError, ValueError):
    pass


class StateError(BinliteError, RuntimeError):
    pass


class PrecisionError(BinliteError, TypeError):
    pass


class LabelError(BinliteError, ValueError):
    pass


class NumericError(BinliteError, ArithmeticError):
    """Raised when training produces a non-finite loss.

    ``report`` carries the partial TrainReport collected so far.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class IngestionError(BinliteError):
    pass


class DecodeError(BinliteError):
    pass


class ModelFileError(BinliteError):
    """Base class for model-file load failures."""


class BadMagicError(ModelFileError):
    pass


class VersionMismatchError(ModelFileError):
    pass


class TruncatedFileError(ModelFileError):
    pass


class ChecksumError(ModelFileError):
    pass
