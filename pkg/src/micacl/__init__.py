"""Multi-instance category-aware contrastive learning on a small autodiff engine."""

from .data import BagDataset, DatasetSpec, gen_dataset, read_dataset, write_dataset
from .mccl import ClassStats, ScaleSet, cet_loss, mccl_loss
from .model import ModelConfig, ModelParams, RunConfig, forward_model
from .tensor import Tensor, backward, grad_check, no_grad
from .trainer import MetricsReport, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "BagDataset", "DatasetSpec", "gen_dataset", "read_dataset", "write_dataset",
    "ClassStats", "ScaleSet", "cet_loss", "mccl_loss",
    "ModelConfig", "ModelParams", "RunConfig", "forward_model",
    "Tensor", "backward", "grad_check", "no_grad",
    "MetricsReport", "evaluate", "train",
]
