"""Custom exceptions for stitchkit."""


class StitchKitError(Exception):
    """Base exception for stitchkit."""

    pass


class ConfigurationError(StitchKitError):
    """Raised when there's a configuration error."""

    pass


class ValidationError(StitchKitError):
    """Raised when validation of an argument fails."""

    pass


class FileOperationError(StitchKitError):
    """Raised when file operations fail."""

    pass


class DataError(StitchKitError):
    """Raised when a dataset record cannot be loaded or is inconsistent."""

    def __init__(self, message: str, record_id: str | None = None):
        self.record_id = record_id
        if record_id is not None:
            message = f"[{record_id}] {message}"
        super().__init__(message)


class CheckpointError(StitchKitError):
    """Raised when a checkpoint file is malformed or does not match a graph."""

    pass


class ShapeMismatchError(StitchKitError):
    """Raised when tensor shapes are inconsistent."""

    pass


class GraphStateError(StitchKitError):
    """Raised when graph operations are called in the wrong order."""

    pass


class InputTooSmallError(StitchKitError):
    """Raised when an image is too small for the requested operation."""

    pass


class NumericError(StitchKitError):
    """Base class for numeric failures."""

    pass


class NonFiniteError(NumericError):
    """Raised when a NaN or Inf value appears."""

    pass


class DivergenceError(NumericError):
    """Raised when training produces a non-finite objective."""

    pass


class DegenerateGeometryError(NumericError):
    """Raised for singular homographies, degenerate quads and points at infinity."""

    pass


class DegenerateOverlapError(NumericError):
    """Raised when a mask that must be non-empty is empty."""

    pass
