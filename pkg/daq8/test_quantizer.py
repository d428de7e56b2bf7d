import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from daq8.errors import ContractViolation, DimensionError, FormatError
from daq8.quantizer import (
    NEAREST,
    ChannelQuantizedTensor,
    QuantizedTensor,
    QuantScale,
    StochasticRounding,
    clamp,
    decode_quantized,
    dequantize,
    dequantize_per_channel,
    dequantize_product,
    dequantize_weight_grad,
    encode_quantized,
    max_abs_scale,
    quantize,
    quantize_per_channel,
    stochastic_round,
    stochastic_round_array,
)
from daq8.tensor_core import Tensor


def _row(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float32)
    return arr.reshape(1, 1, 1, arr.size)


def _q(values, s, mode=NEAREST) -> np.ndarray:
    return quantize(_row(values), s, mode).data.reshape(-1)


class TestQuantScale:
    @pytest.mark.parametrize("bad", [0.0, -1.0, float("inf"), float("nan")])
    def test_rejects_non_positive_or_non_finite(self, bad):
        with pytest.raises(ContractViolation):
            QuantScale(bad)

    def test_stored_at_float32_precision(self):
        assert QuantScale(0.1).s == float(np.float32(0.1))


class TestClamp:
    def test_inside_and_outside(self):
        assert clamp(0.3, 1.0) == 0.3
        assert clamp(2.0, 1.0) == 1.0
        assert clamp(-2.0, 1.0) == -1.0

    def test_nan(self):
        with pytest.raises(ContractViolation):
            clamp(float("nan"), 1.0)


class TestNearest:
    def test_worked_examples(self):
        # 0.5 * 127 = 63.5 rounds away from zero
        assert list(_q([0.5, -0.5, 0.0, 2.0, -2.0, 1.0], 1.0)) == [64, -64, 0, 127, -127, 127]

    def test_dequantize(self):
        q = quantize(_row([0.5]), 1.0)
        assert float(dequantize(q).data.reshape(-1)[0]) == pytest.approx(64 / 127, rel=1e-7)

    @given(st.floats(-1e4, 1e4, allow_nan=False, width=32), st.floats(1e-3, 1e3))
    @settings(max_examples=300, deadline=None)
    def test_range_and_symmetry(self, x, s):
        q_pos, q_neg = _q([x, -x], s)
        assert -127 <= q_pos <= 127
        assert q_neg == -q_pos

    @given(st.floats(-1e4, 1e4, allow_nan=False, width=32), st.floats(-1e4, 1e4, allow_nan=False, width=32),
           st.floats(1e-3, 1e3))
    @settings(max_examples=300, deadline=None)
    def test_monotone(self, a, b, s):
        lo, hi = min(a, b), max(a, b)
        q_lo, q_hi = _q([lo, hi], s)
        assert q_lo <= q_hi

    def test_roundtrip_error_bound(self):
        scale = QuantScale(0.73)
        x = np.linspace(-scale.s, scale.s, 100_000, dtype=np.float32)
        x_hat = dequantize(quantize(x.reshape(1, 1, 1, -1), scale)).data.reshape(-1)
        bound = scale.s / 254 + 4 * float(np.spacing(np.float32(scale.s)))
        assert float(np.max(np.abs(x_hat.astype(np.float64) - x))) <= bound

    def test_rejects_nan_input(self):
        with pytest.raises(ContractViolation):
            quantize(_row([1.0, np.nan]), 1.0)


class TestStochastic:
    @pytest.mark.parametrize("v", np.linspace(0.05, 0.95, 20))
    def test_unbiased(self, v):
        n = 100_000
        rounded = stochastic_round_array(np.full(n, 3.0 + v), StochasticRounding(seed=int(v * 1000)))
        assert set(np.unique(rounded)) <= {3.0, 4.0}
        assert abs(float(rounded.mean()) - (3.0 + v)) <= 4 * np.sqrt(0.25 / n)

    def test_scalar_rounds_to_neighbours(self):
        for seed in range(50):
            assert stochastic_round(-3.25, StochasticRounding(seed)) in (-4, -3)
        assert stochastic_round(5.0, StochasticRounding(1)) == 5

    def test_scalar_range_check(self):
        with pytest.raises(ContractViolation):
            stochastic_round(128.0, StochasticRounding(0))

    def test_range_fuzz(self):
        rng = np.random.default_rng(0)
        x = (rng.standard_normal(1_000_000) * 10).astype(np.float32)
        for mode in (NEAREST, StochasticRounding(3)):
            q = quantize(x.reshape(1, 1, 1, -1), 2.5, mode).data
            assert q.min() >= -127 and q.max() <= 127

    def test_reproducible_and_keyed(self):
        x = np.random.default_rng(1).standard_normal(4096).astype(np.float32)
        a = _q(x, 4.0, StochasticRounding(7, layer=2, iteration=5))
        b = _q(x, 4.0, StochasticRounding(7, layer=2, iteration=5))
        c = _q(x, 4.0, StochasticRounding(7, layer=2, iteration=6))
        d = _q(x, 4.0, StochasticRounding(7, layer=2, iteration=5).with_stream(1))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert not np.array_equal(a, d)

    def test_draw_depends_only_on_element_index(self):
        rounding = StochasticRounding(11, layer=1, iteration=9)
        assert np.array_equal(rounding.uniforms(1000)[:10], rounding.uniforms(10))


class TestPerChannel:
    def test_each_slice_uses_its_scale(self):
        g = Tensor(np.array([1.0, 0.5, 0.1, 0.05], dtype=np.float32).reshape(2, 1, 1, 2))
        q = quantize_per_channel(g, [1.0, 0.1])
        assert q.data.reshape(2, 2).tolist() == [[127, 64], [127, 64]]
        back = dequantize_per_channel(q).data.reshape(2, 2)
        assert back[1, 1] == pytest.approx(0.1 * 64 / 127, rel=1e-6)

    def test_scale_count_mismatch(self):
        with pytest.raises(DimensionError):
            quantize_per_channel(Tensor.zeros((3, 1, 2, 2)), [1.0, 1.0])

    def test_zero_scale(self):
        with pytest.raises(ContractViolation):
            quantize_per_channel(Tensor.zeros((2, 1, 2, 2)), np.array([1.0, 0.0]))

    def test_weight_grad_factors(self):
        qgw = np.full((2, 1, 1, 1), 127 * 127, dtype=np.int64)
        out = dequantize_weight_grad(qgw, 2.0, [0.5, 3.0]).data.reshape(-1)
        assert out.tolist() == pytest.approx([1.0, 6.0])

    def test_product_factor(self):
        out = dequantize_product(np.array([[[[127 * 127]]]], dtype=np.int32), 0.5, 4.0)
        assert float(out.data.reshape(-1)[0]) == pytest.approx(2.0)


class TestPayloadChecks:
    def test_minus_128_rejected(self):
        with pytest.raises(ContractViolation):
            QuantizedTensor(np.full((1, 1, 1, 1), -128, dtype=np.int8), QuantScale(1.0))

    def test_max_abs_scale_of_zeros(self):
        assert max_abs_scale(np.zeros((1, 1, 2, 2))) is None
        assert max_abs_scale(np.array([-3.0, 2.0])).s == 3.0


class TestQuantizedDump:
    def test_roundtrip_global_and_channel(self):
        q = quantize(_row([0.1, -0.7, 1.0]), 1.0)
        back = decode_quantized(encode_quantized(q))
        assert isinstance(back, QuantizedTensor)
        assert np.array_equal(back.data, q.data) and back.scale == q.scale

        cq = quantize_per_channel(Tensor(np.ones((3, 1, 1, 2), dtype=np.float32)), [1.0, 2.0, 4.0])
        back = decode_quantized(encode_quantized(cq))
        assert isinstance(back, ChannelQuantizedTensor)
        assert np.array_equal(back.scales, cq.scales)

    def test_single_channel_keeps_its_type(self):
        cq = quantize_per_channel(Tensor(np.full((1, 2, 1, 2), 0.5, dtype=np.float32)), [2.0])
        back = decode_quantized(encode_quantized(cq))
        assert isinstance(back, ChannelQuantizedTensor)
        assert np.array_equal(back.data, cq.data) and back.scales.tolist() == [2.0]

    def test_unknown_kind(self):
        blob = bytearray(encode_quantized(quantize(_row([0.5]), 1.0)))
        blob[24] = 7
        with pytest.raises(FormatError) as info:
            decode_quantized(bytes(blob))
        assert info.value.offset == 24

    def test_truncated(self):
        blob = encode_quantized(quantize(_row([0.5, 0.25]), 1.0))
        with pytest.raises(FormatError) as info:
            decode_quantized(blob[:-1])
        assert info.value.offset == len(blob) - 1
