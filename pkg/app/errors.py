"""Error types shared by every stage of the pipeline."""
from typing import Optional


class OceError(Exception):
    """Base error carrying a human readable detail and a CLI exit code."""

    exit_code: int = 2

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class UsageError(OceError):
    """Bad command line or config usage."""

    exit_code = 1


class ConfigError(OceError):
    """A configuration record failed validation."""


class RasterFormatError(OceError):
    """A raster file does not follow the OCER layout."""


class BadMagicError(RasterFormatError):
    pass


class UnsupportedVersionError(RasterFormatError):
    pass


class TruncatedPayloadError(RasterFormatError):
    pass


class UnsupportedDtypeError(RasterFormatError):
    pass


class RasterIOError(OceError):
    """Reading or writing a file failed at the OS level."""

    def __init__(self, path, cause: Exception):
        super().__init__(f"{path}: {cause}")
        self.path = path
        self.cause = cause


class ShapeMismatchError(OceError):
    pass


class NonFiniteError(OceError):
    pass


class IsamGridError(OceError):
    pass


class TilingError(OceError):
    pass


class MetricError(OceError):
    pass


class StageError(OceError):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage: str, cause: Exception):
        detail = getattr(cause, "detail", str(cause))
        super().__init__(f"[{stage}] {detail}")
        self.stage = stage
        self.cause = cause
        if isinstance(cause, OceError):
            self.exit_code = cause.exit_code
