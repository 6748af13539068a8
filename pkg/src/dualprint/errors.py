"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class DualPrintError(Exception):
    """Base class for all package errors."""


class ConfigError(DualPrintError):
    """Invalid configuration or parameters (bad split point, zero frequency, ...)."""


class DataError(DualPrintError):
    """Problems with input data or on-disk artifacts."""


class ManifestError(DataError):
    """Manifest fails validation or references missing files."""


class MinutiaeParseError(DataError):
    """Malformed minutiae sidecar line."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


class BlankImageError(DataError):
    """No image block exceeds the ROI variance threshold."""


class ModelFormatError(DataError):
    """Model container is malformed or does not match expectations."""


class TeacherLookupError(DataError):
    """Teacher descriptor file has no entry for the requested key."""


class NumericalError(DualPrintError):
    """Training aborted on a non-finite loss or similar numerical failure."""
