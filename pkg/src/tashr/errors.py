"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to:
2 for configuration problems, 3 for data problems, 4 for numeric failures.
"""


class TashrError(Exception):
    exit_code = 1


class ConfigError(TashrError):
    exit_code = 2


class DataError(TashrError):
    exit_code = 3


class ImageNotFoundError(DataError):
    pass


class UnsupportedImageError(DataError):
    """Raised for rasters that are not 8-bit RGB (or 8-bit grayscale for masks)."""


class ShapeMismatchError(DataError, ValueError):
    pass


class GeometryError(DataError, ValueError):
    pass


class CheckpointError(DataError):
    pass


class NonFiniteLossError(TashrError, FloatingPointError):
    exit_code = 4

    def __init__(self, term, value=None):
        self.term = term
        self.value = value
        super().__init__(f"non-finite loss term {term!r} (value={value})")
