"""Exception types shared across the package."""


class CsgError(Exception):
    """Base class for all csgrid errors."""


class ShapeError(CsgError, ValueError):
    """Array dimensions do not agree."""


class ConfigError(CsgError, ValueError):
    """A configuration value is outside its valid range."""


class NumericInputError(CsgError, ValueError):
    """Input contains NaN or infinite values."""


class OptimizerError(CsgError, FloatingPointError):
    """Optimizer received non-finite gradients."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class TrainingDivergedError(CsgError, FloatingPointError):
    """Loss became non-finite during training."""

    def __init__(self, message, epoch=None, diagnostics=None):
        super().__init__(message)
        self.epoch = epoch
        self.diagnostics = diagnostics or {}


class CapabilityError(CsgError, ValueError):
    """A pipeline needs dataset fields that are not present."""


class FormatError(CsgError, ValueError):
    """Base class for file loading problems."""


class UnrecognizedFormatError(FormatError):
    """Magic string does not match."""


class TruncatedFileError(FormatError):
    """Payload is shorter than the header promises."""


class VersionMismatchError(FormatError):
    """File was written by an incompatible format version."""


class IntegrityError(FormatError):
    """Stored digest does not match the payload."""


class EmptyDatasetError(CsgError, ValueError):
    """Refusing to persist or process a dataset with no samples."""
