"""Exception hierarchy shared by every module.

The CLI maps :class:`ValidationError` (and file-format problems, which are
input validation too) to exit code 1 and :class:`DivergenceError` to exit
code 2.
"""


class TransferRiskError(Exception):
    """Base class for all package errors."""


class ValidationError(TransferRiskError, ValueError):
    """Bad argument, configuration, or input value."""


class ShapeError(ValidationError):
    """Tensor or raster extents do not agree."""


class FormatError(TransferRiskError):
    """A binary or manifest file could not be decoded."""


class VersionError(FormatError):
    """Wrong magic bytes, unsupported format version, or unknown dtype code."""


class TruncatedFileError(FormatError):
    """The file ended before the declared payload."""


class DimMismatchError(FormatError):
    """Declared dimensions disagree with the stored payload."""


class ConfigMismatchError(FormatError):
    """Stored parameters do not match the embedded or expected config."""


class MissingFileError(FormatError, FileNotFoundError):
    """A required file of a dataset directory is absent."""


class DivergenceError(TransferRiskError, RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration
