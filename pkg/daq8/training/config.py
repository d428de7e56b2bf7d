"""
Run configuration for the training harness.

Everything a run depends on lives in TrainConfig, so a run is reproducible
from its JSON config alone. Field reference: daq8/training/README.md.
"""

import json
import math
from enum import Enum
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from daq8.backward_quant import GradientScaling, GxPairing
from daq8.clip_state import MCSHyper
from daq8.errors import ConfigError, DimensionError
from daq8.grad_stats import DEFAULT_ALPHA
from daq8.tensor_core import ConvSpec


class PrecisionMode(str, Enum):
    FP32 = "fp32"
    INT8_DA = "int8-da"
    INT8_GQ = "int8-gq"
    INT8_GVQ = "int8-gvq"
    INT8_MCS = "int8-mcs"

    @property
    def quantized(self) -> bool:
        return self is not PrecisionMode.FP32

    @property
    def scaling(self) -> Optional[GradientScaling]:
        return {
            PrecisionMode.INT8_DA: GradientScaling.DA,
            PrecisionMode.INT8_GQ: GradientScaling.GQ,
            PrecisionMode.INT8_GVQ: GradientScaling.GVQ,
            PrecisionMode.INT8_MCS: GradientScaling.MCS,
        }.get(self)


class LayerSpec(BaseModel):
    """One entry of the model's ordered layer list."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["conv", "relu", "maxpool", "flatten", "linear", "affine"]
    out_channels: Optional[int] = Field(None, ge=1)
    kernel: int = Field(3, ge=1)
    stride: int = Field(1, ge=1)
    padding: int = Field(1, ge=0)
    pool: int = Field(2, ge=1)
    out_features: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def check_kind_fields(self) -> "LayerSpec":
        if self.kind == "conv" and self.out_channels is None:
            raise ValueError("conv layers need out_channels")
        if self.kind == "linear" and self.out_features is None:
            raise ValueError("linear layers need out_features")
        return self

    def conv_spec(self) -> ConvSpec:
        return ConvSpec.square(self.kernel, self.stride, self.padding)


def _default_layers() -> List[LayerSpec]:
    layers = []
    for i, channels in enumerate((8, 16, 32, 32)):
        layers.append(LayerSpec(kind="conv", out_channels=channels))
        layers.append(LayerSpec(kind="relu"))
        if i in (1, 3):
            layers.append(LayerSpec(kind="maxpool"))
    layers.append(LayerSpec(kind="flatten"))
    layers.append(LayerSpec(kind="linear", out_features=10))
    return layers


class ModelSpec(BaseModel):
    """
    Ordered layer list. The default is the desk model: four 3x3 convs
    (8, 16, 32, 32 channels, stride 1, pad 1), two 2x2 max-pools and a linear head.
    """

    model_config = ConfigDict(extra="forbid")

    in_channels: int = Field(1, ge=1)
    input_hw: Tuple[int, int] = (16, 16)
    layers: List[LayerSpec] = Field(default_factory=_default_layers)

    @model_validator(mode="after")
    def check_shapes(self) -> "ModelSpec":
        if not any(layer.kind == "conv" for layer in self.layers):
            raise ValueError("model needs at least one conv layer")
        if not self.layers or self.layers[-1].kind != "linear":
            raise ValueError("model must end with a linear classifier")
        try:
            self.layer_shapes()
        except DimensionError as e:
            raise ValueError(str(e)) from e
        return self

    @property
    def num_classes(self) -> int:
        return int(self.layers[-1].out_features)

    def layer_shapes(self) -> List[Tuple[int, ...]]:
        """Per-sample output shape after each layer: (C, H, W) or (features,)."""
        shape: Tuple[int, ...] = (self.in_channels, *self.input_hw)
        shapes = []
        for index, layer in enumerate(self.layers):
            if layer.kind in ("conv", "maxpool", "affine") and len(shape) != 3:
                raise DimensionError(f"layer {index} ({layer.kind}) needs a feature map input", shape)
            if layer.kind == "conv":
                ho, wo = layer.conv_spec().output_hw(shape[1], shape[2])
                shape = (layer.out_channels, ho, wo)
            elif layer.kind == "maxpool":
                ho, wo = shape[1] // layer.pool, shape[2] // layer.pool
                if ho < 1 or wo < 1:
                    raise DimensionError(f"layer {index}: pooling window larger than feature map", shape)
                shape = (shape[0], ho, wo)
            elif layer.kind == "flatten":
                shape = (int(math.prod(shape)),)
            elif layer.kind == "linear":
                if len(shape) != 1:
                    raise DimensionError(f"layer {index}: linear layer needs a flatten before it", shape)
                shape = (layer.out_features,)
            shapes.append(shape)
        return shapes


class LRSchedule(BaseModel):
    """constant, multistep (epoch milestones, factor gamma) or cosine (per iteration)."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["constant", "multistep", "cosine"] = "constant"
    base_lr: float = Field(0.05, gt=0)
    milestones: List[int] = Field(default_factory=list)
    gamma: float = Field(0.1, gt=0, le=1)
    min_lr: float = Field(0.0, ge=0)

    def lr_at(self, epoch: int, batch_index: int, iters_per_epoch: int, epochs: int) -> float:
        if self.kind == "constant":
            return self.base_lr
        if self.kind == "multistep":
            passed = sum(1 for m in self.milestones if epoch >= m)
            return self.base_lr * self.gamma ** passed
        total = max(1, iters_per_epoch * epochs)
        progress = (epoch * iters_per_epoch + batch_index) / total
        return self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + math.cos(math.pi * progress))


class Seeds(BaseModel):
    """All randomness of a run. No defaults: every seed is stated."""

    model_config = ConfigDict(extra="forbid")

    init: int = Field(ge=0)
    shuffle: int = Field(ge=0)
    rounding: int = Field(ge=0)
    data: int = Field(ge=0)

    @classmethod
    def from_base(cls, base: int) -> "Seeds":
        return cls(init=base, shuffle=base + 1, rounding=base + 2, data=base + 3)


class DatasetSource(BaseModel):
    """Built-in Gaussian-blob generator or an IDX image/label file pair."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["synthetic", "idx"] = "synthetic"
    train_size: int = Field(2000, ge=1)
    val_size: int = Field(500, ge=0)
    image_size: int = Field(16, ge=4)
    num_classes: int = Field(10, ge=2)
    noise: float = Field(0.1, ge=0)
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    val_images: Optional[str] = None
    val_labels: Optional[str] = None

    @model_validator(mode="after")
    def check_idx_paths(self) -> "DatasetSource":
        if self.kind == "idx" and not (self.train_images and self.train_labels):
            raise ValueError("idx datasets need train_images and train_labels")
        return self


class TrainConfig(BaseModel):
    """Full description of one training run."""

    model_config = ConfigDict(extra="forbid")

    mode: PrecisionMode = PrecisionMode.INT8_DA
    hyper: MCSHyper = Field(default_factory=MCSHyper)
    epochs: int = Field(20, ge=0)
    batch_size: int = Field(32, ge=1)
    schedule: LRSchedule = Field(default_factory=LRSchedule)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(0.0, ge=0)
    seeds: Seeds
    dataset: DatasetSource = Field(default_factory=DatasetSource)
    model: ModelSpec = Field(default_factory=ModelSpec)
    metrics_every: int = Field(50, ge=1)
    alpha: float = Field(DEFAULT_ALPHA, ge=0)
    gx_pairing: GxPairing = GxPairing.OPERAND
    exempt_first_last: bool = False
    checkpoint_every: int = Field(0, ge=0)
    eval_train_samples: int = Field(500, ge=1)
    dump_gradients: bool = False

    @model_validator(mode="after")
    def check_dataset_matches_model(self) -> "TrainConfig":
        if self.dataset.kind == "synthetic":
            if tuple(self.model.input_hw) != (self.dataset.image_size, self.dataset.image_size):
                raise ValueError("model input_hw must match the synthetic image size")
            if self.model.in_channels != 1:
                raise ValueError("synthetic images have one channel")
        if self.model.num_classes != self.dataset.num_classes:
            raise ValueError("classifier width must equal the number of dataset classes")
        return self

    def with_overrides(self, **changes) -> "TrainConfig":
        """Copy with fields replaced, re-validated."""
        data = self.model_dump(mode="json", by_alias=True)
        for key, value in changes.items():
            data[key] = value.model_dump(mode="json", by_alias=True) if isinstance(value, BaseModel) else value
        return parse_config(data)

    def to_json(self) -> str:
        return self.model_dump_json(by_alias=True, indent=2)


def parse_config(data: Union[dict, str]) -> TrainConfig:
    """Validate a dict or JSON string, raising ConfigError on any problem."""
    try:
        if isinstance(data, str):
            return TrainConfig.model_validate_json(data)
        return TrainConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid training config: {e}") from e


def load_config(path: Union[str, Path]) -> TrainConfig:
    """Read a JSON config file."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    return parse_config(text)


def default_config(seed: int = 0, **changes) -> TrainConfig:
    config = TrainConfig(seeds=Seeds.from_base(seed))
    return config.with_overrides(**changes) if changes else config
