"""Exception hierarchy shared by every module."""


class PtqRobustError(Exception):
    """Base class for all errors raised by this package."""


class ImageFormatError(PtqRobustError):
    """Malformed raster header."""


class UnsupportedFormatError(ImageFormatError):
    """Well-formed but unsupported raster variant (P3, maxval != 255, ...)."""


class TruncatedDataError(PtqRobustError):
    """Payload shorter than its header promises."""


class CodecError(PtqRobustError):
    """JPEG stream could not be produced or decoded."""


class InvalidRangeError(PtqRobustError, ValueError):
    """A parameter range or bound violates its contract."""


class DatasetError(PtqRobustError):
    """Inconsistent or unreadable detection dataset."""


class CalibrationError(PtqRobustError):
    """Calibration could not be performed."""


class ModelFormatError(PtqRobustError):
    """Bad model container or inconsistent layer chain."""


class ReportError(PtqRobustError):
    """Records cannot be rendered into the requested table."""
