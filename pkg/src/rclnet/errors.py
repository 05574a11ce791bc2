"""Exception types raised across the package."""


class RclNetError(Exception):
    """Base class for all package errors."""


class DimensionError(RclNetError, ValueError):
    """Tensor extents do not line up."""


class ConfigurationError(RclNetError, ValueError):
    """A spec or config produces an invalid layer/shape/sampler setup."""


class StateError(RclNetError, RuntimeError):
    """A backward pass was requested without the matching forward cache."""


class FormatError(RclNetError, ValueError):
    """A sequence file or checkpoint could not be decoded.

    ``offset`` is the byte offset at which decoding failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDiverged(RclNetError, FloatingPointError):
    """Loss or gradients became non-finite during training."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class UndefinedCorrelation(RclNetError, ValueError):
    """Pearson correlation requested on a constant vector."""
