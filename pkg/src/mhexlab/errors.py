"""Exception taxonomy shared across the package."""


class MhexError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(MhexError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigurationError(MhexError, ValueError):
    """A configuration value violates its stated invariant."""


class ContractError(MhexError, RuntimeError):
    """An operation was called outside its contract (bad graph state, empty input, ...)."""


class TrainingDivergedError(MhexError, RuntimeError):
    """Loss became NaN/Inf during training."""

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")


class CheckpointError(MhexError, RuntimeError):
    """Base class for checkpoint load failures."""


class CheckpointFormatError(CheckpointError):
    """Magic bytes missing or file truncated/corrupted."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class CheckpointShapeError(CheckpointError):
    """Stored shape table does not match the model built from the stored config."""


class UndefinedCorrelationError(MhexError, ValueError):
    """Pearson correlation requested on a zero-variance series."""
