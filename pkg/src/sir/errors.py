"""Exception hierarchy shared by every stage.

Anything deriving from :class:`DataError` maps to CLI exit code 2.
"""


class SIRError(Exception):
    """Base class for all package errors."""


class DataError(SIRError):
    """Bad or inconsistent input data."""


class BehindCamera(DataError):
    pass


class NoConverge(DataError):
    pass


class OutOfBounds(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class UnsupportedCameraKind(DataError):
    pass


class UnsupportedFormat(DataError):
    pass


class MissingFile(DataError):
    pass


class EmptyProxy(DataError):
    pass


class NoSources(DataError):
    pass


class DegenerateRange(DataError):
    pass


class MissingGroundTruth(DataError):
    pass


class MemoryOverflow(DataError, OverflowError):
    """Byte count does not fit in a signed 64-bit integer."""
