"""
Symmetric 8-bit quantization: q(x) = round(127 * clamp(x, s) / s), x_hat = q * s / 127.

Nearest rounding (ties away from zero) is used for weights and activations,
stochastic rounding for gradients. Stochastic draws come from a counter-based
Philox stream keyed by (seed, layer, iteration, stream), so element i always
sees the same uniform no matter how the work is split.
"""

import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from daq8.config import QMAX
from daq8.errors import ContractViolation, DimensionError, FormatError
from daq8.tensor_core import Tensor

QUANT_MAGIC = b"DAQ8QNT1"
_EXTENTS = struct.Struct("<4I")
_HEADER = struct.Struct("<BI")
KIND_GLOBAL = 0
KIND_CHANNEL = 1


@dataclass(frozen=True)
class QuantScale:
    """Positive, finite clipping bound s (stored at float32 precision)."""

    s: float

    def __post_init__(self):
        value = float(self.s)
        if not math.isfinite(value) or value <= 0.0:
            raise ContractViolation(f"quantization scale must be positive and finite, got {self.s}")
        object.__setattr__(self, "s", float(np.float32(value)))

    def __float__(self) -> float:
        return self.s


ScaleLike = Union[QuantScale, float]


def as_scale(s: ScaleLike) -> QuantScale:
    return s if isinstance(s, QuantScale) else QuantScale(float(s))


@dataclass(frozen=True)
class NearestRounding:
    """Round half away from zero; keeps q(-x) == -q(x)."""


@dataclass(frozen=True)
class StochasticRounding:
    """Seeded stochastic rounding; reproducible and split-invariant."""

    seed: int
    layer: int = 0
    iteration: int = 0
    stream: int = 0

    def generator(self) -> np.random.Generator:
        key = np.random.SeedSequence(
            [self.seed, self.layer, self.iteration, self.stream]
        ).generate_state(2, dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def uniforms(self, n: int) -> np.ndarray:
        """Uniform [0, 1) draws; draw i belongs to element i."""
        return self.generator().random(n)

    def with_stream(self, stream: int) -> "StochasticRounding":
        return StochasticRounding(self.seed, self.layer, self.iteration, stream)


NEAREST = NearestRounding()
RoundingMode = Union[NearestRounding, StochasticRounding]


def _check_int8_range(data: np.ndarray) -> None:
    if data.dtype != np.int8:
        raise ContractViolation(f"quantized payload must be int8, got {data.dtype}")
    if data.size and (int(data.min()) < -QMAX or int(data.max()) > QMAX):
        raise ContractViolation("quantized payload outside [-127, 127]")


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    """int8 payload with one global scale."""

    data: np.ndarray
    scale: QuantScale

    def __post_init__(self):
        if self.data.ndim != 4:
            raise DimensionError("quantized tensor must have rank 4", self.data.shape)
        _check_int8_range(self.data)
        self.data.setflags(write=False)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True, eq=False)
class ChannelQuantizedTensor:
    """int8 payload whose leading-axis slices each carry their own scale."""

    data: np.ndarray
    scales: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.data.ndim != 4:
            raise DimensionError("quantized tensor must have rank 4", self.data.shape)
        _check_int8_range(self.data)
        scales = np.asarray(self.scales, dtype=np.float32).reshape(-1)
        if scales.shape[0] != self.data.shape[0]:
            raise DimensionError("one scale per leading channel required",
                                 (scales.shape[0], *self.data.shape))
        if not (np.isfinite(scales).all() and (scales > 0).all()):
            raise ContractViolation("channel scales must be positive and finite")
        scales.setflags(write=False)
        self.data.setflags(write=False)
        object.__setattr__(self, "scales", scales)

    @property
    def shape(self):
        return self.data.shape


def clamp(x: float, s: ScaleLike) -> float:
    """x if |x| <= s, else sign(x) * s."""
    if math.isnan(x):
        raise ContractViolation("clamp of NaN")
    bound = as_scale(s).s
    if abs(x) <= bound:
        return x
    return math.copysign(bound, x)


def round_half_away(v: np.ndarray) -> np.ndarray:
    whole = np.trunc(v)
    frac = v - whole
    return whole + np.sign(v) * (np.abs(frac) >= 0.5)


def stochastic_round_array(v: np.ndarray, rounding: StochasticRounding) -> np.ndarray:
    """floor(v) + Bernoulli(v - floor(v)), element i using uniform draw i."""
    v = np.asarray(v, dtype=np.float64)
    low = np.floor(v)
    u = rounding.uniforms(v.size).reshape(v.shape)
    return low + (u < (v - low))


def stochastic_round(v: float, rounding: StochasticRounding) -> int:
    """
    Round v down with probability ceil(v) - v, otherwise up; E[result] = v.

    Args:
        v: value with |v| <= 127
        rounding: seeded stream; the draw used is the stream's first
    """
    if not abs(v) <= QMAX:
        raise ContractViolation(f"stochastic_round expects |v| <= {QMAX}, got {v}")
    return int(stochastic_round_array(np.array([v]), rounding)[0])


def _quantize_array(arr: np.ndarray, scales: np.ndarray, mode: RoundingMode) -> np.ndarray:
    """Shared kernel: scales broadcast against arr (scalar or per leading channel)."""
    if not np.isfinite(arr).all():
        raise ContractViolation("cannot quantize NaN or Inf values")
    x = arr.astype(np.float64)
    s = scales.astype(np.float64)
    v = np.clip(x, -s, s) / s * QMAX
    if isinstance(mode, StochasticRounding):
        q = stochastic_round_array(v, mode)
    else:
        q = round_half_away(v)
    return np.clip(q, -QMAX, QMAX).astype(np.int8)


def quantize(x: Union[Tensor, np.ndarray], s: ScaleLike, mode: RoundingMode = NEAREST) -> QuantizedTensor:
    """Global quantization of a whole tensor with one scale."""
    scale = as_scale(s)
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    q = _quantize_array(arr, np.array(scale.s), mode)
    return QuantizedTensor(q, scale)


def dequantize(q: QuantizedTensor) -> Tensor:
    """x_hat = q * s / 127."""
    values = q.data.astype(np.float64) * q.scale.s / QMAX
    return Tensor.wrap(values.astype(np.float32))


def _scale_vector(scales: Union[Sequence[ScaleLike], np.ndarray], count: int) -> np.ndarray:
    if isinstance(scales, np.ndarray):
        vector = scales.astype(np.float32).reshape(-1)
    else:
        vector = np.array([as_scale(s).s for s in scales], dtype=np.float32)
    if vector.shape[0] != count:
        raise DimensionError("scale count does not match channel extent", (vector.shape[0], count))
    if not (np.isfinite(vector).all() and (vector > 0).all()):
        raise ContractViolation("channel scales must be positive and finite")
    return vector


def quantize_per_channel(g: Tensor, scales: Union[Sequence[ScaleLike], np.ndarray],
                         mode: RoundingMode = NEAREST) -> ChannelQuantizedTensor:
    """
    Vectorized quantization of a channel-major tensor: slice i uses s_i.

    Args:
        g: channel-major tensor (C, N, H, W)
        scales: one positive scale per leading channel
        mode: rounding mode; stochastic draws follow global element order

    Returns:
        ChannelQuantizedTensor with the same extents as g
    """
    vector = _scale_vector(scales, g.shape[0])
    q = _quantize_array(g.data, vector.reshape(-1, 1, 1, 1), mode)
    return ChannelQuantizedTensor(q, vector)


def dequantize_per_channel(q: ChannelQuantizedTensor) -> Tensor:
    values = q.data.astype(np.float64) * q.scales.astype(np.float64).reshape(-1, 1, 1, 1) / QMAX
    return Tensor.wrap(values.astype(np.float32))


def dequantize_product(q: np.ndarray, s_a: ScaleLike, s_b: ScaleLike) -> Tensor:
    """Integer conv result of two globally quantized operands: q * s_a/127 * s_b/127."""
    factor = (as_scale(s_a).s / QMAX) * (as_scale(s_b).s / QMAX)
    return Tensor.wrap((q.astype(np.float64) * factor).astype(np.float32))


def dequantize_weight_grad(qgw: np.ndarray, s_x: ScaleLike,
                           scales: Union[Sequence[ScaleLike], np.ndarray]) -> Tensor:
    """
    Per-output-channel de-quantization of an integer weight gradient.

    Slice i of qgw (C_out, C_in, k1, k2) is multiplied by s_x/127 * s_i/127,
    an elementwise product once the factor vector is broadcast.
    """
    if qgw.ndim != 4:
        raise DimensionError("weight gradient must have rank 4", qgw.shape)
    vector = _scale_vector(scales, qgw.shape[0]).astype(np.float64)
    factors = (as_scale(s_x).s / QMAX) * (vector / QMAX)
    values = qgw.astype(np.float64) * factors.reshape(-1, 1, 1, 1)
    return Tensor.wrap(values.astype(np.float32))


def max_abs_scale(arr: np.ndarray) -> Optional[QuantScale]:
    """|x|_max as a scale, or None for an all-zero tensor."""
    peak = float(np.max(np.abs(arr))) if arr.size else 0.0
    if peak <= 0.0:
        return None
    return QuantScale(peak)


def encode_quantized(q: Union[QuantizedTensor, ChannelQuantizedTensor]) -> bytes:
    """Dump: magic "DAQ8QNT1", 4 x u32 extents, u8 kind, u32 scale count, float32 scales, int8 payload."""
    if isinstance(q, QuantizedTensor):
        kind, scales = KIND_GLOBAL, np.array([q.scale.s], dtype="<f4")
    else:
        kind, scales = KIND_CHANNEL, q.scales.astype("<f4")
    return (QUANT_MAGIC + _EXTENTS.pack(*q.shape) + _HEADER.pack(kind, scales.size)
            + scales.tobytes() + q.data.astype(np.int8).tobytes())


def decode_quantized(blob: bytes) -> Union[QuantizedTensor, ChannelQuantizedTensor]:
    offset = len(QUANT_MAGIC)
    if len(blob) < offset + _EXTENTS.size + _HEADER.size:
        raise FormatError("quantized dump truncated in header", offset=len(blob))
    if blob[:offset] != QUANT_MAGIC:
        raise FormatError("bad quantized dump magic", offset=0)
    shape = _EXTENTS.unpack_from(blob, offset)
    offset += _EXTENTS.size
    kind, count = _HEADER.unpack_from(blob, offset)
    if kind not in (KIND_GLOBAL, KIND_CHANNEL):
        raise FormatError(f"unknown quantized dump kind {kind}", offset=offset)
    if kind == KIND_GLOBAL and count != 1:
        raise FormatError(f"per-tensor dump carries {count} scales", offset=offset + 1)
    offset += _HEADER.size
    payload = int(np.prod(shape, dtype=np.int64))
    expected = offset + 4 * count + payload
    if len(blob) != expected:
        raise FormatError(f"quantized dump length mismatch, expected {expected} bytes", offset=len(blob))
    scales = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).astype(np.float32)
    offset += 4 * count
    data = np.frombuffer(blob, dtype=np.int8, offset=offset).reshape(shape).copy()
    if kind == KIND_GLOBAL:
        return QuantizedTensor(data, QuantScale(float(scales[0])))
    return ChannelQuantizedTensor(data, scales)
