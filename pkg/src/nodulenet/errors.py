"""Exception hierarchy shared across the package."""


class NoduleNetError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(NoduleNetError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class DomainError(NoduleNetError, ValueError):
    """An operation was evaluated outside its mathematical domain."""


class NonFiniteError(NoduleNetError, FloatingPointError):
    """An operation produced NaN or Inf."""


class ContractError(NoduleNetError, ValueError):
    """A caller violated an operation's precondition."""


class ConfigurationError(NoduleNetError, ValueError):
    """Invalid configuration or hyperparameters."""


class DataError(NoduleNetError, ValueError):
    """Malformed or out-of-range input data."""


class FormatError(NoduleNetError):
    """A serialized file is corrupt, truncated, or of an unknown version."""


class IncompatibilityError(NoduleNetError):
    """A checkpoint or manifest does not match the target network."""


class TrainingDivergedError(NoduleNetError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int, step: int):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
