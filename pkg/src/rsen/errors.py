"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor dims violate an operation's contract."""


class ConfigError(ValueError):
    """Invalid configuration value or unknown configuration key."""


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint magic or format version is not supported."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint payload ends before the declared contents."""


class CheckpointMismatchError(CheckpointError):
    """Tensor names or dims do not match the expected architecture."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""
