import numpy as np
import pytest

from daq8.errors import ContractViolation, DimensionError, FormatError, OverflowRiskError
from daq8.quantizer import dequantize, dequantize_product, max_abs_scale, quantize
from daq8.tensor_core import (
    ConvOp,
    ConvSpec,
    Tensor,
    conv2d_backward_input,
    conv2d_backward_weight,
    conv2d_forward,
    conv2d_naive,
    decode_tensor,
    encode_tensor,
    int_conv,
    int_conv_reference,
    transpose_from_channel_major,
    transpose_to_channel_major,
)

SPECS = [
    ConvSpec.square(3),
    ConvSpec.square(3, stride=2, padding=1),
    ConvSpec((2, 3), (1, 2), (1, 0)),
    ConvSpec.square(1),
]


def _random(rng, shape, scale=1.0):
    return (rng.standard_normal(shape) * scale).astype(np.float32)


def _conv64(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """float64 direct convolution used as the finite-difference target."""
    n, c_in, h, wd = x.shape
    ho, wo = spec.output_hw(h, wd)
    ph, pw = spec.padding
    sh, sw = spec.stride
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((n, w.shape[0], ho, wo))
    for kh in range(spec.kernel[0]):
        for kw in range(spec.kernel[1]):
            xs = xp[:, :, kh:kh + sh * (ho - 1) + 1:sh, kw:kw + sw * (wo - 1) + 1:sw]
            out += np.einsum("nchw,oc->nohw", xs, w[:, :, kh, kw].astype(np.float64))
    return out


class TestTensor:
    def test_is_read_only_copy(self):
        src = np.ones((1, 2, 3, 3), dtype=np.float32)
        t = Tensor(src)
        src[0, 0, 0, 0] = 5.0
        assert t.data[0, 0, 0, 0] == 1.0
        assert not t.data.flags.writeable

    def test_rejects_non_finite(self):
        bad = np.zeros((1, 1, 2, 2), dtype=np.float32)
        bad[0, 0, 1, 1] = np.nan
        with pytest.raises(ContractViolation):
            Tensor(bad)

    @pytest.mark.parametrize("shape", [(2, 2, 2), (1, 0, 2, 2)])
    def test_rejects_bad_rank_or_extent(self, shape):
        with pytest.raises(DimensionError):
            Tensor(np.zeros(shape, dtype=np.float32))


class TestConvSpec:
    def test_output_extents(self):
        assert ConvSpec.square(3).output_hw(5, 5) == (3, 3)
        assert ConvSpec.square(3, stride=2, padding=1).output_hw(5, 5) == (3, 3)
        assert ConvSpec.square(3, padding=1).output_hw(16, 16) == (16, 16)

    def test_kernel_larger_than_input(self):
        with pytest.raises(DimensionError):
            ConvSpec.square(5).output_hw(3, 3)

    def test_rejects_zero_stride(self):
        with pytest.raises(DimensionError):
            ConvSpec((3, 3), (0, 1))


class TestFloatConv:
    @pytest.mark.parametrize("spec", SPECS)
    def test_forward_matches_naive_bit_for_bit(self, spec):
        rng = np.random.default_rng(7)
        x = Tensor(_random(rng, (2, 3, 6, 7)))
        w = Tensor(_random(rng, (4, 3, *spec.kernel)))
        fast = conv2d_forward(x, w, spec)
        slow = conv2d_naive(x, w, spec)
        assert np.array_equal(fast.data, slow.data)

    def test_forward_independent_of_thread_count(self, monkeypatch):
        rng = np.random.default_rng(3)
        x = Tensor(_random(rng, (5, 2, 8, 8)))
        w = Tensor(_random(rng, (3, 2, 3, 3)))
        spec = ConvSpec.square(3, padding=1)
        monkeypatch.setenv("DAQ8_THREADS", "1")
        single = conv2d_forward(x, w, spec)
        monkeypatch.setenv("DAQ8_THREADS", "3")
        multi = conv2d_forward(x, w, spec)
        assert np.array_equal(single.data, multi.data)

    @pytest.mark.parametrize("spec", SPECS)
    def test_forward_is_linear_in_input(self, spec):
        rng = np.random.default_rng(11)
        x1, x2 = _random(rng, (2, 3, 6, 7)), _random(rng, (2, 3, 6, 7))
        w = _random(rng, (4, 3, *spec.kernel))
        a, b = np.float32(0.75), np.float32(-1.5)
        lhs = conv2d_forward(Tensor(a * x1 + b * x2), Tensor(w), spec).data.astype(np.float64)
        rhs = (float(a) * conv2d_forward(Tensor(x1), Tensor(w), spec).data.astype(np.float64)
               + float(b) * conv2d_forward(Tensor(x2), Tensor(w), spec).data.astype(np.float64))
        magnitude = _conv64(np.abs(a * x1) + np.abs(b * x2), np.abs(w), spec)
        assert float(np.max(np.abs(lhs - rhs))) <= 1e-6 * float(np.max(magnitude))

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            conv2d_forward(Tensor.zeros((1, 2, 5, 5)), Tensor.zeros((1, 3, 3, 3)), ConvSpec.square(3))

    @pytest.mark.parametrize("seed", range(50))
    def test_backward_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        spec = SPECS[seed % len(SPECS)]
        x = _random(rng, (2, 2, 5, 6))
        w = _random(rng, (3, 2, *spec.kernel))
        ho, wo = spec.output_hw(5, 6)
        r = rng.standard_normal((2, 3, ho, wo))

        g_x = conv2d_backward_input(Tensor(r.astype(np.float32)), Tensor(w), spec, input_hw=(5, 6)).data
        g_w = conv2d_backward_weight(Tensor(x), Tensor(r.astype(np.float32)), spec).data
        r32 = r.astype(np.float32).astype(np.float64)

        def loss(xv, wv):
            return float(np.sum(_conv64(xv, wv, spec) * r32))

        h = 1e-3
        for _ in range(5):
            idx = tuple(rng.integers(0, s) for s in x.shape)
            xp, xm = x.astype(np.float64), x.astype(np.float64)
            xp[idx] += h
            xm[idx] -= h
            fd = (loss(xp, w) - loss(xm, w)) / (2 * h)
            assert fd == pytest.approx(float(g_x[idx]), rel=1e-3, abs=1e-4)

            idx = tuple(rng.integers(0, s) for s in w.shape)
            wp, wm = w.astype(np.float64), w.astype(np.float64)
            wp[idx] += h
            wm[idx] -= h
            fd = (loss(x, wp) - loss(x, wm)) / (2 * h)
            assert fd == pytest.approx(float(g_w[idx]), rel=1e-3, abs=1e-4)

    def test_backward_input_infers_extents(self):
        spec = ConvSpec.square(3)
        g = Tensor(np.ones((1, 2, 3, 3), dtype=np.float32))
        w = Tensor(np.ones((2, 1, 3, 3), dtype=np.float32))
        assert conv2d_backward_input(g, w, spec).shape == (1, 1, 5, 5)

    def test_channel_major_roundtrip(self):
        t = Tensor(np.arange(24, dtype=np.float32).reshape(2, 3, 2, 2))
        cm = transpose_to_channel_major(t)
        assert cm.shape == (3, 2, 2, 2)
        assert np.array_equal(transpose_from_channel_major(cm).data, t.data)


def _int8(rng, shape):
    return rng.integers(-127, 128, size=shape).astype(np.int8)


class TestIntConv:
    @pytest.mark.parametrize("spec", SPECS)
    def test_matches_int64_oracle(self, spec):
        rng = np.random.default_rng(11)
        x = _int8(rng, (2, 3, 7, 6))
        w = _int8(rng, (4, 3, *spec.kernel))
        ho, wo = spec.output_hw(7, 6)
        g = _int8(rng, (2, 4, ho, wo))

        fwd = int_conv(x, w, spec, ConvOp.FORWARD)
        assert fwd.dtype == np.int32
        assert np.array_equal(fwd, int_conv_reference(x, w, spec, ConvOp.FORWARD))

        gx = int_conv(g, w, spec, ConvOp.INPUT_GRAD, (7, 6))
        assert np.array_equal(gx, int_conv_reference(g, w, spec, ConvOp.INPUT_GRAD, (7, 6)))

        x_cm = np.ascontiguousarray(x.transpose(1, 0, 2, 3))
        g_cm = np.ascontiguousarray(g.transpose(1, 0, 2, 3))
        gw = int_conv(x_cm, g_cm, spec, ConvOp.WEIGHT_GRAD)
        assert gw.shape == (4, 3, *spec.kernel)
        assert np.array_equal(gw, int_conv_reference(x_cm, g_cm, spec, ConvOp.WEIGHT_GRAD))

    def test_extreme_values_are_exact(self):
        spec = ConvSpec.square(3, padding=1)
        x = np.full((1, 64, 8, 8), 127, dtype=np.int8)
        w = np.full((2, 64, 3, 3), -127, dtype=np.int8)
        out = int_conv(x, w, spec)
        assert out[0, 0, 4, 4] == -127 * 127 * 64 * 9

    def test_rejects_minus_128(self):
        x = np.zeros((1, 1, 3, 3), dtype=np.int8)
        x[0, 0, 0, 0] = -128
        with pytest.raises(ContractViolation):
            int_conv(x, np.zeros((1, 1, 3, 3), dtype=np.int8), ConvSpec.square(3))

    def test_rejects_non_int8(self):
        with pytest.raises(ContractViolation):
            int_conv(np.zeros((1, 1, 3, 3), dtype=np.int16), np.zeros((1, 1, 3, 3), dtype=np.int8),
                     ConvSpec.square(3))

    def test_forward_overflow_risk(self):
        a = np.zeros((1, 2000, 3, 3), dtype=np.int8)
        b = np.zeros((1, 2000, 3, 3), dtype=np.int8)
        with pytest.raises(OverflowRiskError):
            int_conv(a, b, ConvSpec.square(3))

    def test_weight_grad_overflow_risk(self):
        a = np.zeros((1, 1, 130, 130), dtype=np.int8)
        b = np.zeros((1, 1, 130, 130), dtype=np.int8)
        with pytest.raises(OverflowRiskError):
            int_conv(a, b, ConvSpec.square(1), ConvOp.WEIGHT_GRAD)

    @pytest.mark.parametrize("seed", range(100))
    def test_dequantized_integer_conv_equals_float_conv(self, seed):
        rng = np.random.default_rng(1000 + seed)
        spec = SPECS[seed % len(SPECS)]
        x = _random(rng, (2, 3, 6, 6), scale=rng.uniform(0.1, 10))
        w = _random(rng, (2, 3, *spec.kernel), scale=rng.uniform(0.01, 1))
        xq = quantize(x, max_abs_scale(x))
        wq = quantize(w, max_abs_scale(w))
        integer = dequantize_product(int_conv(xq.data, wq.data, spec), xq.scale, wq.scale).data
        reference = _conv64(dequantize(xq).data, dequantize(wq).data, spec)
        atol = 1e-5 * float(np.max(np.abs(reference)))
        np.testing.assert_allclose(integer, reference, rtol=1e-5, atol=atol)


class TestTensorDump:
    def test_roundtrip(self):
        t = Tensor(np.linspace(-1, 1, 24, dtype=np.float32).reshape(1, 2, 3, 4))
        assert np.array_equal(decode_tensor(encode_tensor(t)).data, t.data)

    def test_truncated_payload_reports_offset(self):
        blob = encode_tensor(Tensor.zeros((1, 1, 2, 2)))[:-3]
        with pytest.raises(FormatError) as info:
            decode_tensor(blob)
        assert info.value.offset == len(blob)

    def test_bad_magic(self):
        blob = b"NOTATNSR" + encode_tensor(Tensor.zeros((1, 1, 1, 1)))[8:]
        with pytest.raises(FormatError) as info:
            decode_tensor(blob)
        assert info.value.offset == 0
