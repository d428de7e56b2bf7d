"""
Dense NCHW tensors and the convolution primitives used by the engine.

Three float convolutions (forward, input-gradient, weight-gradient) plus their
integer-accumulate counterpart `int_conv`, and a brute-force oracle that the
vectorized forward path must match bit for bit.

Layout is row-major NCHW throughout; every per-channel operation indexes C.
"""

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Tuple, Union

import numpy as np

from daq8 import config
from daq8.errors import ContractViolation, DimensionError, FormatError, OverflowRiskError

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b"DAQ8TNSR"
_EXTENTS = struct.Struct("<4I")


@dataclass(frozen=True, eq=False)
class Tensor:
    """Immutable rank-4 float32 tensor (N, C, H, W)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, order="C", copy=True)
        _validate_array(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt a freshly computed float32 array without copying it."""
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        _validate_array(arr)
        arr.setflags(write=False)
        tensor = object.__new__(cls)
        object.__setattr__(tensor, "data", arr)
        return tensor

    @classmethod
    def zeros(cls, shape: Tuple[int, int, int, int]) -> "Tensor":
        return cls.wrap(np.zeros(shape, dtype=np.float32))

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def _validate_array(arr: np.ndarray) -> None:
    if arr.ndim != 4:
        raise DimensionError("tensor must have rank 4", arr.shape)
    if any(extent < 1 for extent in arr.shape):
        raise DimensionError("all tensor extents must be >= 1", arr.shape)
    if not np.isfinite(arr).all():
        raise ContractViolation("tensor contains NaN or Inf values")


@dataclass(frozen=True)
class ConvSpec:
    """Kernel extents, stride and zero padding of a 2-D convolution."""

    kernel: Tuple[int, int]
    stride: Tuple[int, int] = (1, 1)
    padding: Tuple[int, int] = (0, 0)

    def __post_init__(self):
        if any(k < 1 for k in self.kernel):
            raise DimensionError("kernel extents must be >= 1", self.kernel)
        if any(s < 1 for s in self.stride):
            raise DimensionError("stride must be positive", self.stride)
        if any(p < 0 for p in self.padding):
            raise DimensionError("padding must be non-negative", self.padding)

    @classmethod
    def square(cls, k: int, stride: int = 1, padding: int = 0) -> "ConvSpec":
        return cls((k, k), (stride, stride), (padding, padding))

    def output_hw(self, h: int, w: int) -> Tuple[int, int]:
        """Output extents floor((in + 2*pad - k) / stride) + 1, each >= 1."""
        out = []
        for size, k, s, p in zip((h, w), self.kernel, self.stride, self.padding):
            span = size + 2 * p - k
            if span < 0:
                raise DimensionError("kernel larger than padded input", (h, w, *self.kernel))
            out.append(span // s + 1)
        return out[0], out[1]

    def default_input_hw(self, ho: int, wo: int) -> Tuple[int, int]:
        """Smallest input extents that produce (ho, wo)."""
        h = (ho - 1) * self.stride[0] + self.kernel[0] - 2 * self.padding[0]
        w = (wo - 1) * self.stride[1] + self.kernel[1] - 2 * self.padding[1]
        if h < 1 or w < 1:
            raise DimensionError("cannot infer input extents", (ho, wo))
        return h, w


class ConvOp(str, Enum):
    """Which of the three convolutions an integer kernel evaluates."""

    FORWARD = "forward"          # Y = X * W
    INPUT_GRAD = "input_grad"    # G_X = G (transpose conv) W
    WEIGHT_GRAD = "weight_grad"  # G_W = X' (dilation conv) G', channel-major operands


def _pad(arr: np.ndarray, spec: ConvSpec) -> np.ndarray:
    ph, pw = spec.padding
    if ph == 0 and pw == 0:
        return arr
    return np.pad(arr, ((0, 0), (0, 0), (ph, ph), (pw, pw)), mode="constant")


def _window(arr: np.ndarray, kh: int, kw: int, spec: ConvSpec, ho: int, wo: int) -> np.ndarray:
    """Strided view of the padded input seen by kernel tap (kh, kw)."""
    sh, sw = spec.stride
    return arr[:, :, kh:kh + sh * (ho - 1) + 1:sh, kw:kw + sw * (wo - 1) + 1:sw]


def _parallel_over_batch(n: int, work: Callable[[int, int], None]) -> None:
    """Run work(start, stop) over batch chunks; chunks write disjoint slices."""
    threads = min(config.thread_count(), n)
    if threads <= 1:
        work(0, n)
        return
    bounds = np.linspace(0, n, threads + 1).astype(int)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(work, int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        for future in futures:
            future.result()


def _check_forward_shapes(x_shape, w_shape, spec: ConvSpec) -> Tuple[int, int]:
    if x_shape[1] != w_shape[1]:
        raise DimensionError("input channels do not match weight input channels",
                             (*x_shape, *w_shape))
    if tuple(w_shape[2:]) != tuple(spec.kernel):
        raise DimensionError("weight kernel extents do not match ConvSpec", (*w_shape, *spec.kernel))
    return spec.output_hw(x_shape[2], x_shape[3])


def conv2d_forward(x: Tensor, w: Tensor, spec: ConvSpec) -> Tensor:
    """
    Direct-summation convolution Y = X * W.

    Accumulates in float32 over (c_in, k1, k2) in that fixed order, so every
    output element equals `conv2d_naive` bit for bit.
    """
    ho, wo = _check_forward_shapes(x.shape, w.shape, spec)
    n, c_in = x.shape[0], x.shape[1]
    c_out = w.shape[0]
    xp = _pad(x.data, spec)
    wd = w.data
    out = np.zeros((n, c_out, ho, wo), dtype=np.float32)

    def work(start: int, stop: int) -> None:
        acc = out[start:stop]
        xs_all = xp[start:stop]
        for ci in range(c_in):
            for kh in range(spec.kernel[0]):
                for kw in range(spec.kernel[1]):
                    xs = _window(xs_all, kh, kw, spec, ho, wo)[:, ci]
                    acc += xs[:, None, :, :] * wd[None, :, ci, kh, kw, None, None]

    _parallel_over_batch(n, work)
    return Tensor.wrap(out)


def conv2d_naive(x: Tensor, w: Tensor, spec: ConvSpec) -> Tensor:
    """Seven-loop reference convolution with float32 scalar accumulation."""
    ho, wo = _check_forward_shapes(x.shape, w.shape, spec)
    n, c_in, h, wd = x.shape
    c_out = w.shape[0]
    sh, sw = spec.stride
    ph, pw = spec.padding
    out = np.zeros((n, c_out, ho, wo), dtype=np.float32)
    for b in range(n):
        for co in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    acc = np.float32(0.0)
                    for ci in range(c_in):
                        for kh in range(spec.kernel[0]):
                            ih = i * sh + kh - ph
                            if ih < 0 or ih >= h:
                                continue
                            for kw in range(spec.kernel[1]):
                                iw = j * sw + kw - pw
                                if iw < 0 or iw >= wd:
                                    continue
                                acc = np.float32(acc + x.data[b, ci, ih, iw] * w.data[co, ci, kh, kw])
                    out[b, co, i, j] = acc
    return Tensor.wrap(out)


def conv2d_backward_input(g: Tensor, w: Tensor, spec: ConvSpec,
                          input_hw: Optional[Tuple[int, int]] = None) -> Tensor:
    """
    Input gradient G_X = G (transpose conv) W.

    Args:
        g: output gradient (N, C_out, H_out, W_out)
        w: weights (C_out, C_in, k1, k2)
        spec: convolution geometry of the forward op
        input_hw: forward input extents; inferred as the smallest fitting size if omitted

    Returns:
        Tensor with the forward input's extents (N, C_in, H, W)
    """
    if g.shape[1] != w.shape[0]:
        raise DimensionError("gradient channels do not match weight output channels",
                             (*g.shape, *w.shape))
    h, wd = input_hw if input_hw is not None else spec.default_input_hw(g.shape[2], g.shape[3])
    ho, wo = _check_forward_shapes((g.shape[0], w.shape[1], h, wd), w.shape, spec)
    if (ho, wo) != tuple(g.shape[2:]):
        raise DimensionError("gradient extents do not match forward output", (*g.shape, ho, wo))
    out = _transpose_conv(g.data, w.data, spec, (h, wd), np.float64)
    return Tensor.wrap(out.astype(np.float32))


def conv2d_backward_weight(x: Tensor, g: Tensor, spec: ConvSpec) -> Tensor:
    """
    Weight gradient G_W = X' (dilation conv) G'.

    Args:
        x: forward input (N, C_in, H, W)
        g: output gradient (N, C_out, H_out, W_out)
        spec: convolution geometry of the forward op

    Returns:
        Tensor with weight extents (C_out, C_in, k1, k2)
    """
    if x.shape[0] != g.shape[0]:
        raise DimensionError("input and gradient batch extents differ", (*x.shape, *g.shape))
    ho, wo = spec.output_hw(x.shape[2], x.shape[3])
    if (ho, wo) != tuple(g.shape[2:]):
        raise DimensionError("gradient extents do not match forward output", (*g.shape, ho, wo))
    out = _dilation_conv(x.data, g.data, spec, np.float64, channel_major=False)
    return Tensor.wrap(out.astype(np.float32))


def _transpose_conv(g: np.ndarray, w: np.ndarray, spec: ConvSpec,
                    input_hw: Tuple[int, int], dtype) -> np.ndarray:
    n = g.shape[0]
    c_in = w.shape[1]
    ho, wo = g.shape[2], g.shape[3]
    ph, pw = spec.padding
    h, wd = input_hw
    gxp = np.zeros((n, c_in, h + 2 * ph, wd + 2 * pw), dtype=dtype)

    def work(start: int, stop: int) -> None:
        gs = g[start:stop]
        target = gxp[start:stop]
        for kh in range(spec.kernel[0]):
            for kw in range(spec.kernel[1]):
                contrib = np.einsum("nohw,oc->nchw", gs, w[:, :, kh, kw], dtype=dtype)
                _window(target, kh, kw, spec, ho, wo)[...] += contrib

    _parallel_over_batch(n, work)
    return gxp[:, :, ph:ph + h, pw:pw + wd]


def _dilation_conv(x: np.ndarray, g: np.ndarray, spec: ConvSpec, dtype,
                   channel_major: bool) -> np.ndarray:
    # channel-major operands are (C, N, H, W); reduction runs over N, H_out, W_out
    if channel_major:
        x = x.transpose(1, 0, 2, 3)
        g = g.transpose(1, 0, 2, 3)
    c_in = x.shape[1]
    c_out = g.shape[1]
    ho, wo = g.shape[2], g.shape[3]
    xp = _pad(x, spec)
    gw = np.zeros((c_out, c_in, spec.kernel[0], spec.kernel[1]), dtype=dtype)
    for kh in range(spec.kernel[0]):
        for kw in range(spec.kernel[1]):
            xs = _window(xp, kh, kw, spec, ho, wo)
            gw[:, :, kh, kw] = np.einsum("nohw,nchw->oc", g, xs, dtype=dtype)
    return gw


def transpose_to_channel_major(t: Tensor) -> Tensor:
    """(N, C, H, W) -> (C, N, H, W)."""
    return Tensor.wrap(np.ascontiguousarray(t.data.transpose(1, 0, 2, 3)))


def transpose_from_channel_major(t: Tensor) -> Tensor:
    """(C, N, H, W) -> (N, C, H, W); inverse of transpose_to_channel_major."""
    return Tensor.wrap(np.ascontiguousarray(t.data.transpose(1, 0, 2, 3)))


def products_per_output(op: ConvOp, a_shape, b_shape, spec: ConvSpec) -> int:
    """Number of products summed into one output element of int_conv."""
    k = spec.kernel[0] * spec.kernel[1]
    if op is ConvOp.FORWARD:
        return a_shape[1] * k
    if op is ConvOp.INPUT_GRAD:
        return a_shape[1] * k
    # channel-major operands: a = X' (C_in, N, H, W), b = G' (C_out, N, H_out, W_out)
    return b_shape[1] * b_shape[2] * b_shape[3]


def _check_int_operand(arr: np.ndarray, name: str) -> None:
    if arr.dtype != np.int8:
        raise ContractViolation(f"{name} must be int8, got {arr.dtype}")
    if arr.ndim != 4:
        raise DimensionError(f"{name} must have rank 4", arr.shape)
    if arr.size and int(arr.min()) < -127:
        raise ContractViolation(f"{name} contains -128; symmetric operands lie in [-127, 127]")


def int_conv(a: np.ndarray, b: np.ndarray, spec: ConvSpec, op: ConvOp = ConvOp.FORWARD,
             input_hw: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """
    Integer convolution with exact 32-bit accumulation.

    Operands are int8 in [-127, 127]. Operand roles by `op`:
        FORWARD:     a = q(X) (N, C_in, H, W),        b = q(W) (C_out, C_in, k1, k2)
        INPUT_GRAD:  a = q(G) (N, C_out, H_out, W_out), b = q(W)
        WEIGHT_GRAD: a = q(X') (C_in, N, H, W),       b = q(G') (C_out, N, H_out, W_out)

    At most INT_ACC_PRODUCT_BOUND (2^14) products feed any output element, so
    |sum| <= 2^14 * 127^2 < 2^31. Larger extents raise OverflowRiskError before
    any arithmetic is done.

    Returns:
        int32 array: (N, C_out, H_out, W_out), (N, C_in, H, W) or (C_out, C_in, k1, k2)
    """
    _check_int_operand(a, "a")
    _check_int_operand(b, "b")
    products = products_per_output(op, a.shape, b.shape, spec)
    if products > config.INT_ACC_PRODUCT_BOUND:
        raise OverflowRiskError(
            f"{op.value}: {products} products per output element exceed the 32-bit "
            f"accumulation bound of {config.INT_ACC_PRODUCT_BOUND}"
        )
    a32 = a.astype(np.int32)
    b32 = b.astype(np.int32)

    if op is ConvOp.FORWARD:
        ho, wo = _check_forward_shapes(a.shape, b.shape, spec)
        n, c_in = a.shape[0], a.shape[1]
        ap = _pad(a32, spec)
        out = np.zeros((n, b.shape[0], ho, wo), dtype=np.int32)

        def work(start: int, stop: int) -> None:
            xs_all = ap[start:stop]
            for kh in range(spec.kernel[0]):
                for kw in range(spec.kernel[1]):
                    xs = _window(xs_all, kh, kw, spec, ho, wo)
                    out[start:stop] += np.einsum("nchw,oc->nohw", xs, b32[:, :, kh, kw], dtype=np.int32)

        _parallel_over_batch(n, work)
        return out

    if op is ConvOp.INPUT_GRAD:
        if a.shape[1] != b.shape[0]:
            raise DimensionError("gradient channels do not match weight output channels",
                                 (*a.shape, *b.shape))
        h, wd = input_hw if input_hw is not None else spec.default_input_hw(a.shape[2], a.shape[3])
        ho, wo = spec.output_hw(h, wd)
        if (ho, wo) != tuple(a.shape[2:]):
            raise DimensionError("gradient extents do not match forward output", (*a.shape, ho, wo))
        return _transpose_conv(a32, b32, spec, (h, wd), np.int32)

    if a.shape[1] != b.shape[1]:
        raise DimensionError("channel-major operands disagree on batch extent", (*a.shape, *b.shape))
    ho, wo = spec.output_hw(a.shape[2], a.shape[3])
    if (ho, wo) != tuple(b.shape[2:]):
        raise DimensionError("gradient extents do not match forward output", (*b.shape, ho, wo))
    return _dilation_conv(a32, b32, spec, np.int32, channel_major=True)


def int_conv_reference(a: np.ndarray, b: np.ndarray, spec: ConvSpec, op: ConvOp = ConvOp.FORWARD,
                       input_hw: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """64-bit float-free oracle for int_conv (no bound check)."""
    a64 = a.astype(np.int64)
    b64 = b.astype(np.int64)
    if op is ConvOp.FORWARD:
        ho, wo = spec.output_hw(a.shape[2], a.shape[3])
        ap = _pad(a64, spec)
        out = np.zeros((a.shape[0], b.shape[0], ho, wo), dtype=np.int64)
        for kh in range(spec.kernel[0]):
            for kw in range(spec.kernel[1]):
                xs = _window(ap, kh, kw, spec, ho, wo)
                out += np.tensordot(xs, b64[:, :, kh, kw], axes=([1], [1])).transpose(0, 3, 1, 2)
        return out
    if op is ConvOp.INPUT_GRAD:
        h, wd = input_hw if input_hw is not None else spec.default_input_hw(a.shape[2], a.shape[3])
        return _transpose_conv(a64, b64, spec, (h, wd), np.int64)
    return _dilation_conv(a64, b64, spec, np.int64, channel_major=True)


def encode_tensor(t: Tensor) -> bytes:
    """Tensor dump: magic "DAQ8TNSR", 4 x u32 extents, little-endian float32 payload."""
    return TENSOR_MAGIC + _EXTENTS.pack(*t.shape) + t.data.astype("<f4").tobytes()


def decode_tensor(blob: bytes) -> Tensor:
    header = len(TENSOR_MAGIC) + _EXTENTS.size
    if len(blob) < header:
        raise FormatError("tensor dump truncated in header", offset=len(blob))
    if blob[:len(TENSOR_MAGIC)] != TENSOR_MAGIC:
        raise FormatError("bad tensor dump magic", offset=0)
    shape = _EXTENTS.unpack_from(blob, len(TENSOR_MAGIC))
    expected = header + 4 * int(np.prod(shape, dtype=np.int64))
    if len(blob) != expected:
        raise FormatError(f"tensor dump payload length mismatch, expected {expected} bytes",
                          offset=len(blob))
    arr = np.frombuffer(blob, dtype="<f4", offset=header).reshape(shape)
    return Tensor(arr.astype(np.float32))


def save_tensor(path: Union[str, Path], t: Tensor) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(t))
    logger.debug(f"Wrote tensor {t.shape} to {path}")
    return path


def load_tensor(path: Union[str, Path]) -> Tensor:
    return decode_tensor(Path(path).read_bytes())
