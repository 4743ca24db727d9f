"""Two-pathway 3D CNNs for benign/malignant nodule classification, on numpy."""

from .architectures import ARCH_KINDS, NetworkGraph, build, count_parameters, freeze_convolutional
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import (
    ConfigurationError,
    ContractError,
    DataError,
    DimensionError,
    DomainError,
    FormatError,
    IncompatibilityError,
    NoduleNetError,
    NonFiniteError,
    TrainingDivergedError,
)
from .metrics import EvalReport, ScoredSample, confusion_metrics, evaluate, roc_auc
from .optim import Adadelta, LossConfig, total_loss, weighted_bce
from .tensor import Tensor, backward, no_grad
from .train import TrainConfig, cross_validate, loss_trend_flags, pretrain, train_fold, transfer

__version__ = "0.1.0"

__all__ = [
    "ARCH_KINDS",
    "Adadelta",
    "Checkpoint",
    "ConfigurationError",
    "ContractError",
    "DataError",
    "DimensionError",
    "DomainError",
    "EvalReport",
    "FormatError",
    "IncompatibilityError",
    "LossConfig",
    "NetworkGraph",
    "NoduleNetError",
    "NonFiniteError",
    "ScoredSample",
    "Tensor",
    "TrainConfig",
    "TrainingDivergedError",
    "backward",
    "build",
    "confusion_metrics",
    "count_parameters",
    "cross_validate",
    "loss_trend_flags",
    "evaluate",
    "freeze_convolutional",
    "load_checkpoint",
    "no_grad",
    "pretrain",
    "roc_auc",
    "save_checkpoint",
    "total_loss",
    "train_fold",
    "transfer",
    "weighted_bce",
]
