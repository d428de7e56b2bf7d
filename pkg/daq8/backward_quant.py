"""
Quantized backward pass for one convolution layer.

Given the layer's saved forward operands q(X), q(W) and the float output
gradient G_Y, every call:

    1. computes per-channel statistics of G_Y and classifies each channel,
    2. updates the clipping scales (ClipState),
    3. quantizes G_Y twice with stochastic rounding:
       per channel (stream 0) for the weight gradient and globally with
       |g|_max (stream 1) for the input gradient,
    4. evaluates both gradients with integer convolutions and de-quantizes them.

The scale-selection step is the only thing that differs between the
ablation modes (GradientScaling), so all of them share this code path.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from daq8 import config
from daq8.clip_state import ClipState, MCSHyper, update_layer
from daq8.errors import ContractViolation, DimensionError, OverflowRiskError
from daq8.grad_stats import (
    ChannelStats,
    DistributionClass,
    classify,
    compute_channel_stats,
    compute_layer_channel_stats,
    quantization_error,
)
from daq8.quantizer import (
    QuantizedTensor,
    RoundingMode,
    StochasticRounding,
    dequantize,
    dequantize_per_channel,
    dequantize_product,
    dequantize_weight_grad,
    max_abs_scale,
    quantize,
    quantize_per_channel,
)
from daq8.tensor_core import (
    ConvOp,
    ConvSpec,
    Tensor,
    int_conv,
    save_tensor,
    transpose_to_channel_major,
)

logger = logging.getLogger(__name__)

VECTORIZED_STREAM = 0
GLOBAL_STREAM = 1


class GradientScaling(str, Enum):
    """How the weight-gradient side picks its clipping scales."""

    DA = "da"    # per-channel scales from the clipping state machine
    GQ = "gq"    # one global |g|_max for every channel
    GVQ = "gvq"  # per-channel |g|_max, no clipping state
    MCS = "mcs"  # clipping state machine on the whole layer, one scale


class GxPairing(str, Enum):
    """Which forward scale de-quantizes which gradient."""

    OPERAND = "operand"  # G_W with s_X, G_X with s_W
    STRICT = "strict"    # G_W with s_W, G_X with s_X


@dataclass(frozen=True, eq=False)
class LayerQuantContext:
    """Forward artifacts a conv layer saves for its quantized backward pass."""

    layer_id: str
    layer_index: int
    xq: QuantizedTensor
    wq: QuantizedTensor
    spec: ConvSpec

    def __post_init__(self):
        if self.xq.shape[1] != self.wq.shape[1]:
            raise DimensionError("saved activation channels do not match weight input channels",
                                 (*self.xq.shape, *self.wq.shape))
        if tuple(self.wq.shape[2:]) != tuple(self.spec.kernel):
            raise DimensionError("saved weight kernel does not match ConvSpec",
                                 (*self.wq.shape, *self.spec.kernel))
        self.spec.output_hw(self.xq.shape[2], self.xq.shape[3])

    @property
    def input_hw(self) -> Tuple[int, int]:
        return self.xq.shape[2], self.xq.shape[3]

    @property
    def output_shape(self) -> Tuple[int, int, int, int]:
        ho, wo = self.spec.output_hw(*self.input_hw)
        return self.xq.shape[0], self.wq.shape[0], ho, wo


@dataclass
class BackwardTrace:
    """Everything one quantized backward step decided, for metrics and diagnostics."""

    g_x: Tensor
    g_w: Tensor
    stats: List[ChannelStats] = field(default_factory=list)
    classes: List[DistributionClass] = field(default_factory=list)
    scales: Optional[np.ndarray] = None
    global_scale: Optional[float] = None
    error_active: Optional[float] = None
    error_gq: Optional[float] = None
    pairing_divergence: Dict[str, float] = field(default_factory=dict)
    degenerate: bool = False

    def class_counts(self) -> Dict[str, int]:
        counts = {cls.value: 0 for cls in DistributionClass}
        for cls in self.classes:
            counts[cls.value] += 1
        return counts


def _streams(rounding: RoundingMode) -> Tuple[RoundingMode, RoundingMode]:
    if isinstance(rounding, StochasticRounding):
        return rounding.with_stream(VECTORIZED_STREAM), rounding.with_stream(GLOBAL_STREAM)
    return rounding, rounding


def _check_gradient(ctx: LayerQuantContext, g_y: Tensor) -> None:
    if tuple(g_y.shape) != tuple(ctx.output_shape):
        raise DimensionError(f"output gradient of layer {ctx.layer_id} has the wrong shape",
                             (*g_y.shape, *ctx.output_shape))


def _select_scales(g_y: Tensor, scaling: GradientScaling, state: Optional[ClipState],
                   hyper: Optional[MCSHyper], layer_id: str, global_peak: float
                   ) -> Tuple[np.ndarray, List[ChannelStats], List[DistributionClass]]:
    c_out = g_y.shape[1]
    if scaling is GradientScaling.GQ:
        return np.full(c_out, global_peak, dtype=np.float32), [], []

    if scaling is GradientScaling.MCS:
        if state is None or hyper is None:
            raise ContractViolation("whole-layer clipping needs a ClipState and MCSHyper")
        layer_stats = [compute_channel_stats(g_y.data)]
        classes = [classify(layer_stats[0], hyper.lam)]
        scale = update_layer(state, layer_id, layer_stats, classes, hyper)
        return np.full(c_out, scale[0], dtype=np.float32), layer_stats, classes

    channel_stats = compute_layer_channel_stats(g_y)
    if scaling is GradientScaling.GVQ:
        peaks = np.array([s.g_max if not s.is_degenerate else 1.0 for s in channel_stats],
                         dtype=np.float32)
        return peaks, channel_stats, []

    if state is None or hyper is None:
        raise ContractViolation("per-channel clipping needs a ClipState and MCSHyper")
    classes = [classify(s, hyper.lam) for s in channel_stats]
    scales = update_layer(state, layer_id, channel_stats, classes, hyper)
    return scales, channel_stats, classes


def weight_grad_int(x_cm: np.ndarray, g_cm: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """
    Integer weight gradient from channel-major operands, tiled over the batch.

    Each tile keeps N_tile * H_out * W_out within the 32-bit accumulation bound;
    tile partials are summed in int64.
    """
    per_sample = g_cm.shape[2] * g_cm.shape[3]
    if per_sample > config.INT_ACC_PRODUCT_BOUND:
        raise OverflowRiskError(
            f"a single sample contributes {per_sample} products per weight-gradient element, "
            f"above the bound of {config.INT_ACC_PRODUCT_BOUND}"
        )
    n = g_cm.shape[1]
    tile = max(1, config.INT_ACC_PRODUCT_BOUND // per_sample)
    if n <= tile:
        return int_conv(x_cm, g_cm, spec, ConvOp.WEIGHT_GRAD).astype(np.int64)
    total = None
    for start in range(0, n, tile):
        stop = min(n, start + tile)
        partial = int_conv(np.ascontiguousarray(x_cm[:, start:stop]),
                           np.ascontiguousarray(g_cm[:, start:stop]),
                           spec, ConvOp.WEIGHT_GRAD).astype(np.int64)
        total = partial if total is None else total + partial
    return total


def backward_layer_traced(ctx: LayerQuantContext, g_y: Tensor, state: Optional[ClipState],
                          hyper: Optional[MCSHyper], rounding: RoundingMode,
                          scaling: GradientScaling = GradientScaling.DA,
                          pairing: GxPairing = GxPairing.OPERAND,
                          alpha: Optional[float] = None,
                          dump_dir: Optional[Path] = None) -> BackwardTrace:
    """
    Quantized backward pass of one conv layer, returning the full trace.

    Args:
        ctx: saved forward artifacts of the layer
        g_y: float output gradient (N, C_out, H_out, W_out)
        state: clipping state (required for DA and MCS scaling, untouched otherwise)
        hyper: clipping hyper-parameters (required for DA and MCS scaling)
        rounding: stochastic rounding keyed by (seed, layer, iteration), or NEAREST
        scaling: scale-selection rule for the weight-gradient side
        pairing: de-quantization scale pairing
        alpha: when given, record the magnitude-weighted quantization error of
            the active and global quantizations of G_Y
        dump_dir: when given, write G_Y as a tensor dump for offline analysis

    Returns:
        BackwardTrace with g_x (N, C_in, H, W) and g_w (C_out, C_in, k1, k2)
    """
    _check_gradient(ctx, g_y)
    if dump_dir is not None:
        iteration = state.iteration if state is not None else 0
        save_tensor(Path(dump_dir) / f"{ctx.layer_id}_gy_t{iteration}.daq8t", g_y)

    global_scale = max_abs_scale(g_y.data)
    if global_scale is None:
        logger.debug(f"Layer {ctx.layer_id}: all-zero output gradient, skipping quantization")
        n, c_in, h, w = ctx.xq.shape
        return BackwardTrace(g_x=Tensor.zeros((n, c_in, h, w)), g_w=Tensor.zeros(ctx.wq.shape),
                             degenerate=True)

    scales, stats_, classes = _select_scales(g_y, scaling, state, hyper, ctx.layer_id, global_scale.s)
    vector_mode, global_mode = _streams(rounding)

    g_cm = transpose_to_channel_major(g_y)
    vq = quantize_per_channel(g_cm, scales, vector_mode)
    qg = quantize(g_y, global_scale, global_mode)

    x_cm = np.ascontiguousarray(ctx.xq.data.transpose(1, 0, 2, 3))
    qgw = weight_grad_int(x_cm, vq.data, ctx.spec)
    qgx = int_conv(qg.data, ctx.wq.data, ctx.spec, ConvOp.INPUT_GRAD, ctx.input_hw)

    s_x, s_w = ctx.xq.scale, ctx.wq.scale
    if pairing is GxPairing.OPERAND:
        g_w = dequantize_weight_grad(qgw, s_x, vq.scales)
        g_x = dequantize_product(qgx, global_scale, s_w)
    else:
        g_w = dequantize_weight_grad(qgw, s_w, vq.scales)
        g_x = dequantize_product(qgx, global_scale, s_x)

    trace = BackwardTrace(
        g_x=g_x, g_w=g_w, stats=stats_, classes=classes, scales=vq.scales.copy(),
        global_scale=global_scale.s,
        pairing_divergence={"g_w": abs(s_w.s / s_x.s - 1.0), "g_x": abs(s_x.s / s_w.s - 1.0)},
    )
    if alpha is not None:
        # both errors measured in NCHW order against the same float gradient
        active_hat = dequantize_per_channel(vq).data.transpose(1, 0, 2, 3)
        trace.error_active = quantization_error(g_y, active_hat, alpha)
        trace.error_gq = quantization_error(g_y, dequantize(qg), alpha)
    return trace


def backward_layer(ctx: LayerQuantContext, g_y: Tensor, state: Optional[ClipState],
                   hyper: Optional[MCSHyper], rounding: RoundingMode,
                   scaling: GradientScaling = GradientScaling.DA,
                   pairing: GxPairing = GxPairing.OPERAND) -> Tuple[Tensor, Tensor]:
    """Distribution-adaptive quantized backward pass; returns (g_x, g_w)."""
    trace = backward_layer_traced(ctx, g_y, state, hyper, rounding, scaling, pairing)
    return trace.g_x, trace.g_w


def backward_layer_gq(ctx: LayerQuantContext, g_y: Tensor, rounding: RoundingMode,
                      pairing: GxPairing = GxPairing.OPERAND) -> Tuple[Tensor, Tensor]:
    """Global-quantization baseline: one |g|_max scale for every channel of G_Y."""
    trace = backward_layer_traced(ctx, g_y, None, None, rounding, GradientScaling.GQ, pairing)
    return trace.g_x, trace.g_w
