"""
Magnitude-aware clipping state: per-layer, per-channel clipping scales.

Each backward pass updates every channel with either the Gaussian rule
(s = |g|_max) or the Inverted-T recurrence s_t = (1 - kA) s_{t-1} + A |g|_max.
"""

import logging
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from daq8.errors import CheckpointError, DegenerateSliceError, DimensionError
from daq8.grad_stats import ChannelStats, DistributionClass
from daq8.utils_checkpoints import Sink, read_container, require_section, write_container

logger = logging.getLogger(__name__)

SECTION = "clip_state/v1"
_STATE_HEADER = struct.Struct("<QI")
_NAME_LEN = struct.Struct("<H")
_CHANNELS = struct.Struct("<I")


class MCSHyper(BaseModel):
    """Clipping hyper-parameters k, A and the discriminator threshold lambda."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    k: float = Field(1.0, gt=0)
    A: float = Field(0.8, gt=0, le=1)
    lam: float = Field(0.3, gt=0, lt=1, alias="lambda")
    # k*A > 1 makes the recurrence oscillate in sign; only for reproducing such grid cells
    allow_oscillation: bool = False

    @model_validator(mode="after")
    def check_recurrence_stable(self) -> "MCSHyper":
        decay = 1.0 - self.k * self.A
        if decay < 0 and not self.allow_oscillation:
            raise ValueError(
                f"1 - k*A = {decay:.4g} < 0: the clipping recurrence would oscillate "
                f"(k={self.k}, A={self.A}); set allow_oscillation to run it anyway"
            )
        return self

    @property
    def decay(self) -> float:
        return 1.0 - self.k * self.A


@dataclass
class LayerClip:
    """Scales for one layer; unseeded channels hold a 1.0 placeholder."""

    scales: np.ndarray
    seeded: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "LayerClip":
        return cls(np.ones(channels, dtype=np.float32), np.zeros(channels, dtype=bool))


class ClipState:
    """Per-layer clipping scales plus the backward-pass counter t."""

    def __init__(self):
        self.layers: Dict[str, LayerClip] = {}
        self.iteration: int = 0

    def scales(self, layer_id: str) -> Optional[np.ndarray]:
        layer = self.layers.get(layer_id)
        return None if layer is None else layer.scales.copy()

    def topology(self) -> Dict[str, int]:
        return {name: int(layer.scales.size) for name, layer in self.layers.items()}

    def advance(self) -> None:
        """Called once at the end of each backward pass."""
        self.iteration += 1

    def __eq__(self, other) -> bool:
        if not isinstance(other, ClipState):
            return NotImplemented
        if self.iteration != other.iteration or self.layers.keys() != other.layers.keys():
            return False
        return all(
            np.array_equal(self.layers[k].scales, other.layers[k].scales)
            and np.array_equal(self.layers[k].seeded, other.layers[k].seeded)
            for k in self.layers
        )


def update_channel_scale(prev: Optional[float], stats: ChannelStats, cls: DistributionClass,
                         hyper: MCSHyper) -> float:
    """
    New clipping scale for one channel.

    Args:
        prev: previous scale, or None on the channel's first non-degenerate iteration
        stats: current-iteration statistics of the raw gradient slice
        cls: discriminator label for this iteration
        hyper: k, A (lambda is applied upstream by classify)

    Returns:
        |g|_max for Gaussian channels and for the first iteration,
        (1 - kA) prev + A |g|_max for Inverted-T channels.

    Raises:
        DegenerateSliceError: the slice is all zeros
    """
    if stats.is_degenerate:
        raise DegenerateSliceError("all-zero gradient slice; keep the previous scale")
    if prev is None or cls is DistributionClass.GAUSSIAN:
        return stats.g_max
    updated = hyper.decay * prev + hyper.A * stats.g_max
    if updated <= 0.0:
        # only reachable with allow_oscillation
        logger.warning(f"Oscillating recurrence produced s={updated:.4g}; falling back to |g|_max")
        return stats.g_max
    return updated


def update_layer(state: ClipState, layer_id: str, stats: Sequence[ChannelStats],
                 classes: Sequence[DistributionClass], hyper: MCSHyper) -> np.ndarray:
    """
    Apply update_channel_scale to every channel of a layer.

    Degenerate channels keep their stored scale. The iteration counter is not
    touched here; the backward pass calls ClipState.advance once after all layers.

    Returns:
        Copy of the layer's updated scale vector (float32)
    """
    if len(stats) != len(classes):
        raise DimensionError("one class per channel required", (len(stats), len(classes)))
    layer = state.layers.get(layer_id)
    if layer is None:
        layer = LayerClip.fresh(len(stats))
    elif layer.scales.size != len(stats):
        raise DimensionError(f"layer {layer_id} changed channel count mid-run",
                             (layer.scales.size, len(stats)))
    scales = layer.scales.copy()
    seeded = layer.seeded.copy()
    for c, (channel_stats, cls) in enumerate(zip(stats, classes)):
        if channel_stats.is_degenerate:
            continue
        prev = float(scales[c]) if seeded[c] else None
        scales[c] = np.float32(update_channel_scale(prev, channel_stats, cls, hyper))
        seeded[c] = True
    state.layers[layer_id] = LayerClip(scales, seeded)
    return scales.copy()


def encode_clip_state(state: ClipState) -> bytes:
    """clip_state/v1 payload: u64 iteration, u32 layers, then per layer name, channels, scales, seeded flags."""
    parts = [_STATE_HEADER.pack(state.iteration, len(state.layers))]
    for name in sorted(state.layers):
        layer = state.layers[name]
        encoded = name.encode("utf-8")
        parts.append(_NAME_LEN.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_CHANNELS.pack(layer.scales.size))
        parts.append(layer.scales.astype("<f4").tobytes())
        parts.append(layer.seeded.astype(np.uint8).tobytes())
    return b"".join(parts)


def decode_clip_state(payload: bytes, expected_topology: Optional[Dict[str, int]] = None) -> ClipState:
    state = ClipState()
    try:
        iteration, count = _STATE_HEADER.unpack_from(payload, 0)
        offset = _STATE_HEADER.size
        for _ in range(count):
            (name_len,) = _NAME_LEN.unpack_from(payload, offset)
            offset += _NAME_LEN.size
            name = payload[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (channels,) = _CHANNELS.unpack_from(payload, offset)
            offset += _CHANNELS.size
            end = offset + 4 * channels + channels
            if end > len(payload):
                raise CheckpointError(f"clip state for layer {name} is truncated")
            scales = np.frombuffer(payload, dtype="<f4", count=channels, offset=offset).astype(np.float32)
            offset += 4 * channels
            seeded = np.frombuffer(payload, dtype=np.uint8, count=channels, offset=offset).astype(bool)
            offset += channels
            if not (scales > 0).all():
                raise CheckpointError(f"clip state for layer {name} holds non-positive scales")
            state.layers[name] = LayerClip(scales, seeded)
    except struct.error as e:
        raise CheckpointError(f"clip state section is corrupt: {e}") from e
    if offset != len(payload):
        raise CheckpointError("clip state section has trailing bytes")
    state.iteration = int(iteration)
    if expected_topology is not None:
        check_topology(state, expected_topology)
    return state


def check_topology(state: ClipState, expected: Dict[str, int]) -> None:
    """Every stored layer must exist in the model with the same channel count."""
    mismatched: List[str] = []
    for name, channels in state.topology().items():
        if expected.get(name) != channels:
            mismatched.append(f"{name}: stored {channels}, model {expected.get(name)}")
    if mismatched:
        raise CheckpointError("clip state does not match model topology (" + "; ".join(mismatched) + ")")


def save_state(state: ClipState, sink: Sink) -> None:
    write_container(sink, {SECTION: encode_clip_state(state)})


def load_state(source: Sink, expected_topology: Optional[Dict[str, int]] = None) -> ClipState:
    sections = read_container(source)
    return decode_clip_state(require_section(sections, SECTION), expected_topology)
