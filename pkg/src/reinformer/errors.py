"""Exception types shared across the package."""


class ReinformerError(Exception):
    """Base class for all package errors."""


class ShapeError(ReinformerError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(ReinformerError):
    """A documented precondition was violated by the caller."""


class ConfigError(ReinformerError):
    """A configuration value is out of its legal range."""


class NumericsError(ReinformerError):
    """A numeric quantity became non-finite where finiteness is required."""


class DatasetError(ReinformerError):
    """A dataset file is malformed; message carries the offending line."""


class CheckpointError(ReinformerError):
    """A checkpoint file is malformed or has an unsupported version."""
