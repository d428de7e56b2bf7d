"""Desk-scale training harness: small CNN, SGD, INT8 forward and quantized backward."""

from daq8.training.config import (
    DatasetSource,
    LayerSpec,
    LRSchedule,
    ModelSpec,
    PrecisionMode,
    Seeds,
    TrainConfig,
    default_config,
    load_config,
    parse_config,
)
from daq8.training.data import load_dataset
from daq8.training.model import Model, forward_quantized
from daq8.training.trainer import TrainingRun, TrainResult, compare, hyper_grid, train

__all__ = [
    "DatasetSource",
    "LayerSpec",
    "LRSchedule",
    "ModelSpec",
    "PrecisionMode",
    "Seeds",
    "TrainConfig",
    "default_config",
    "load_config",
    "parse_config",
    "load_dataset",
    "Model",
    "forward_quantized",
    "TrainingRun",
    "TrainResult",
    "compare",
    "hyper_grid",
    "train",
]
