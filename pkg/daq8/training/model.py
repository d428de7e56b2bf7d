"""
Small CNN for the harness: layers, the quantized forward pass and the
backward pass that routes conv layers through backward_quant.

Only convolutions are quantized. ReLU, max-pooling, the optional per-channel
affine, the linear classifier and the loss stay in float32.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Set, Tuple

import numpy as np

from daq8.backward_quant import (
    BackwardTrace,
    GradientScaling,
    GxPairing,
    LayerQuantContext,
    backward_layer_traced,
)
from daq8.clip_state import ClipState, MCSHyper
from daq8.errors import CheckpointError, DimensionError
from daq8.quantizer import NEAREST, QuantizedTensor, QuantScale, StochasticRounding, dequantize_product, max_abs_scale, quantize
from daq8.tensor_core import (
    ConvOp,
    ConvSpec,
    Tensor,
    conv2d_backward_input,
    conv2d_backward_weight,
    conv2d_forward,
    int_conv,
)
from daq8.training.config import ModelSpec, PrecisionMode

logger = logging.getLogger(__name__)


@dataclass
class ForwardPass:
    """Per-call forward state: which convs run quantized, and what backward needs."""

    quantized: Set[str] = field(default_factory=set)
    cache: Dict[str, object] = field(default_factory=dict)
    contexts: Dict[str, LayerQuantContext] = field(default_factory=dict)


@dataclass
class BackwardStep:
    """Settings and outputs of one backward pass."""

    iteration: int
    rounding_seed: int = 0
    scaling: Optional[GradientScaling] = None
    state: Optional[ClipState] = None
    hyper: Optional[MCSHyper] = None
    pairing: GxPairing = GxPairing.OPERAND
    alpha: Optional[float] = None
    dump_dir: Optional[Path] = None
    traces: Dict[str, BackwardTrace] = field(default_factory=dict)
    gradients: Dict[str, np.ndarray] = field(default_factory=dict)


class Layer:
    name: str = ""

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, fp: ForwardPass) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray, fp: ForwardPass, step: BackwardStep) -> np.ndarray:
        raise NotImplementedError


def quantize_operand(arr: np.ndarray) -> QuantizedTensor:
    """Global nearest-rounding quantization with s = |x|_max (all-zero tensors use s = 1)."""
    scale = max_abs_scale(arr) or QuantScale(1.0)
    return quantize(arr, scale, NEAREST)


class Conv2d(Layer):
    def __init__(self, name: str, index: int, in_channels: int, out_channels: int,
                 spec: ConvSpec, rng: np.random.Generator):
        super().__init__()
        self.name = name
        self.index = index
        self.spec = spec
        fan_in = in_channels * spec.kernel[0] * spec.kernel[1]
        self.params["weight"] = (rng.standard_normal((out_channels, in_channels, *spec.kernel))
                                 * np.sqrt(2.0 / fan_in)).astype(np.float32)
        self.params["bias"] = np.zeros(out_channels, dtype=np.float32)

    @property
    def out_channels(self) -> int:
        return int(self.params["weight"].shape[0])

    def forward(self, x: np.ndarray, fp: ForwardPass) -> np.ndarray:
        weight = self.params["weight"]
        if self.name in fp.quantized:
            xq = quantize_operand(x)
            wq = quantize_operand(weight)
            acc = int_conv(xq.data, wq.data, self.spec, ConvOp.FORWARD)
            y = dequantize_product(acc, xq.scale, wq.scale).data
            fp.contexts[self.name] = LayerQuantContext(self.name, self.index, xq, wq, self.spec)
        else:
            y = conv2d_forward(Tensor.wrap(x), Tensor.wrap(weight), self.spec).data
            fp.cache[self.name] = x
        return y + self.params["bias"][None, :, None, None]

    def backward(self, g: np.ndarray, fp: ForwardPass, step: BackwardStep) -> np.ndarray:
        g_y = Tensor.wrap(g)
        step.gradients[self.name] = g_y.data
        self.grads["bias"] = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
        if self.name in fp.contexts:
            rounding = StochasticRounding(step.rounding_seed, self.index, step.iteration)
            trace = backward_layer_traced(fp.contexts[self.name], g_y, step.state, step.hyper, rounding,
                                          step.scaling, step.pairing, step.alpha, step.dump_dir)
            step.traces[self.name] = trace
            self.grads["weight"] = trace.g_w.data
            return trace.g_x.data
        x = fp.cache[self.name]
        weight = Tensor.wrap(self.params["weight"])
        self.grads["weight"] = conv2d_backward_weight(Tensor.wrap(x), g_y, self.spec).data
        return conv2d_backward_input(g_y, weight, self.spec, input_hw=x.shape[2:]).data


class ReLU(Layer):
    def __init__(self, name: str):
        super().__init__()
        self.name = name

    def forward(self, x, fp):
        mask = x > 0
        fp.cache[self.name] = mask
        return np.where(mask, x, np.float32(0.0))

    def backward(self, g, fp, step):
        return np.where(fp.cache[self.name], g, np.float32(0.0))


class MaxPool2d(Layer):
    """Non-overlapping k x k max-pooling; trailing rows/cols that do not fill a window are dropped."""

    def __init__(self, name: str, k: int):
        super().__init__()
        self.name = name
        self.k = k

    def forward(self, x, fp):
        n, c, h, w = x.shape
        k = self.k
        ho, wo = h // k, w // k
        windows = (x[:, :, :ho * k, :wo * k]
                   .reshape(n, c, ho, k, wo, k)
                   .transpose(0, 1, 2, 4, 3, 5)
                   .reshape(n, c, ho, wo, k * k))
        # first maximum wins on ties
        argmax = windows.argmax(axis=-1)
        fp.cache[self.name] = (argmax, x.shape)
        return np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]

    def backward(self, g, fp, step):
        argmax, shape = fp.cache[self.name]
        n, c, h, w = shape
        k = self.k
        ho, wo = g.shape[2], g.shape[3]
        scattered = np.zeros((n, c, ho, wo, k * k), dtype=np.float32)
        np.put_along_axis(scattered, argmax[..., None], g[..., None], axis=-1)
        grid = scattered.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
        out = np.zeros(shape, dtype=np.float32)
        out[:, :, :ho * k, :wo * k] = grid
        return out


class Flatten(Layer):
    def __init__(self, name: str):
        super().__init__()
        self.name = name

    def forward(self, x, fp):
        fp.cache[self.name] = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g, fp, step):
        return g.reshape(fp.cache[self.name])


class Linear(Layer):
    def __init__(self, name: str, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.name = name
        self.params["weight"] = (rng.standard_normal((out_features, in_features))
                                 * np.sqrt(1.0 / in_features)).astype(np.float32)
        self.params["bias"] = np.zeros(out_features, dtype=np.float32)

    def forward(self, x, fp):
        fp.cache[self.name] = x
        y = np.einsum("ni,oi->no", x, self.params["weight"], dtype=np.float64)
        return (y + self.params["bias"]).astype(np.float32)

    def backward(self, g, fp, step):
        x = fp.cache[self.name]
        self.grads["weight"] = np.einsum("no,ni->oi", g, x, dtype=np.float64).astype(np.float32)
        self.grads["bias"] = g.sum(axis=0, dtype=np.float64).astype(np.float32)
        return np.einsum("no,oi->ni", g, self.params["weight"], dtype=np.float64).astype(np.float32)


class ChannelAffine(Layer):
    """Per-channel float scale and shift, y = gamma * x + beta."""

    def __init__(self, name: str, channels: int):
        super().__init__()
        self.name = name
        self.params["gamma"] = np.ones(channels, dtype=np.float32)
        self.params["beta"] = np.zeros(channels, dtype=np.float32)

    def forward(self, x, fp):
        fp.cache[self.name] = x
        return x * self.params["gamma"][None, :, None, None] + self.params["beta"][None, :, None, None]

    def backward(self, g, fp, step):
        x = fp.cache[self.name]
        self.grads["gamma"] = (g * x).sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
        self.grads["beta"] = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
        return g * self.params["gamma"][None, :, None, None]


class Model:
    """Ordered layers built from a ModelSpec with He-initialized weights."""

    def __init__(self, spec: ModelSpec, seed: int):
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.layers: List[Layer] = []
        shapes = spec.layer_shapes()
        shape: Tuple[int, ...] = (spec.in_channels, *spec.input_hw)
        counters: Dict[str, int] = {}
        for layer_spec, out_shape in zip(spec.layers, shapes):
            kind = layer_spec.kind
            name = f"{kind}{counters.get(kind, 0)}"
            counters[kind] = counters.get(kind, 0) + 1
            if kind == "conv":
                layer = Conv2d(name, counters["conv"] - 1, shape[0], layer_spec.out_channels,
                               layer_spec.conv_spec(), rng)
            elif kind == "relu":
                layer = ReLU(name)
            elif kind == "maxpool":
                layer = MaxPool2d(name, layer_spec.pool)
            elif kind == "flatten":
                layer = Flatten(name)
            elif kind == "linear":
                layer = Linear(name, shape[0], layer_spec.out_features, rng)
            else:
                layer = ChannelAffine(name, shape[0])
            self.layers.append(layer)
            shape = out_shape

    @property
    def conv_layers(self) -> List[Conv2d]:
        return [layer for layer in self.layers if isinstance(layer, Conv2d)]

    def conv_names(self) -> List[str]:
        return [layer.name for layer in self.conv_layers]

    def conv_topology(self) -> Dict[str, int]:
        return {layer.name: layer.out_channels for layer in self.conv_layers}

    def quantized_layer_names(self, mode: PrecisionMode, exempt_first_last: bool = False) -> Set[str]:
        if not mode.quantized:
            return set()
        names = self.conv_names()
        if exempt_first_last:
            names = names[1:-1]
        return set(names)

    def forward(self, x: np.ndarray, fp: ForwardPass) -> np.ndarray:
        expected = (self.spec.in_channels, *self.spec.input_hw)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise DimensionError("batch does not match model input", (*x.shape, *expected))
        out = x
        for layer in self.layers:
            out = layer.forward(out, fp)
        return out

    def backward(self, g_logits: np.ndarray, fp: ForwardPass, step: BackwardStep) -> None:
        g = g_logits
        for layer in reversed(self.layers):
            g = layer.backward(g, fp, step)

    def named_parameters(self) -> List[Tuple[str, Layer, str]]:
        return [(f"{layer.name}.{key}", layer, key) for layer in self.layers for key in layer.params]

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: layer.params[key] for name, layer, key in self.named_parameters()}

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        expected = {name: layer.params[key].shape for name, layer, key in self.named_parameters()}
        if set(arrays) != set(expected):
            raise CheckpointError("checkpoint parameters do not match the model layer list")
        for name, layer, key in self.named_parameters():
            if arrays[name].shape != expected[name]:
                raise CheckpointError(f"parameter {name} has shape {arrays[name].shape}, model expects {expected[name]}")
            layer.params[key] = arrays[name].astype(np.float32)


def forward_quantized(model: Model, batch: np.ndarray,
                      exempt_first_last: bool = False) -> Tuple[np.ndarray, Dict[str, LayerQuantContext]]:
    """
    Forward pass with globally quantized conv operands.

    Returns:
        (logits, saved LayerQuantContexts keyed by conv layer name)
    """
    fp = ForwardPass(quantized=model.quantized_layer_names(PrecisionMode.INT8_DA, exempt_first_last))
    logits = model.forward(batch, fp)
    return logits, fp.contexts


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = float(-log_probs[np.arange(n), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad / n).astype(np.float32)
