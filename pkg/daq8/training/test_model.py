import math

import numpy as np
import pytest

from daq8.backward_quant import GradientScaling
from daq8.clip_state import ClipState, MCSHyper
from daq8.errors import CheckpointError, DimensionError
from daq8.tensor_core import ConvSpec
from daq8.training.config import ModelSpec, PrecisionMode
from daq8.training.model import (
    BackwardStep,
    Conv2d,
    ForwardPass,
    MaxPool2d,
    Model,
    forward_quantized,
    softmax_cross_entropy,
)


@pytest.fixture
def model():
    return Model(ModelSpec(), seed=0)


@pytest.fixture
def batch():
    return np.random.default_rng(1).random((6, 1, 16, 16)).astype(np.float32)


def test_layer_names_and_topology(model):
    assert model.conv_names() == ["conv0", "conv1", "conv2", "conv3"]
    assert model.conv_topology() == {"conv0": 8, "conv1": 16, "conv2": 32, "conv3": 32}
    assert model.layers[-1].name == "linear0"


def test_quantized_layer_selection(model):
    assert model.quantized_layer_names(PrecisionMode.FP32) == set()
    assert model.quantized_layer_names(PrecisionMode.INT8_GQ) == {"conv0", "conv1", "conv2", "conv3"}
    assert model.quantized_layer_names(PrecisionMode.INT8_DA, exempt_first_last=True) == {"conv1", "conv2"}


def test_initialization_is_seeded():
    a = Model(ModelSpec(), seed=5).state_arrays()
    b = Model(ModelSpec(), seed=5).state_arrays()
    c = Model(ModelSpec(), seed=6).state_arrays()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["conv0.weight"], c["conv0.weight"])


def test_zero_weights_give_zero_logits(model, batch):
    for _, layer, key in model.named_parameters():
        layer.params[key] = np.zeros_like(layer.params[key])
    logits, contexts = forward_quantized(model, batch)
    assert logits.shape == (6, 10)
    assert not logits.any()
    assert set(contexts) == {"conv0", "conv1", "conv2", "conv3"}


def test_wrong_input_shape(model):
    with pytest.raises(DimensionError):
        model.forward(np.zeros((2, 1, 8, 8), dtype=np.float32), ForwardPass())


def test_grid_aligned_conv_matches_float_conv():
    rng = np.random.default_rng(2)
    layer = Conv2d("conv0", 0, 2, 3, ConvSpec.square(3, 1, 1), rng)
    s_w, s_x = np.float32(0.25), np.float32(1.5)
    qw = rng.integers(-127, 128, size=(3, 2, 3, 3))
    qw[0, 0, 0, 0] = 127
    qx = rng.integers(-127, 128, size=(2, 2, 6, 6))
    qx[0, 0, 0, 0] = -127
    layer.params["weight"] = (qw * (float(s_w) / 127)).astype(np.float32)
    x = (qx * (float(s_x) / 127)).astype(np.float32)

    quantized = layer.forward(x, ForwardPass(quantized={"conv0"}))
    plain = layer.forward(x, ForwardPass())
    atol = 1e-5 * float(np.max(np.abs(plain)))
    np.testing.assert_allclose(quantized, plain, rtol=1e-5, atol=atol)


def test_quantized_logits_close_to_float(model, batch):
    quantized, _ = forward_quantized(model, batch)
    plain = model.forward(batch, ForwardPass())
    assert np.max(np.abs(quantized - plain)) <= 0.15 * np.max(np.abs(plain)) + 1e-3


def test_maxpool_routes_gradient_to_first_maximum():
    pool = MaxPool2d("maxpool0", 2)
    fp = ForwardPass()
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    x[0, 0, 2:, :2] = 1.0
    out = pool.forward(x, fp)
    assert out.reshape(-1).tolist() == [5.0, 7.0, 1.0, 15.0]
    g = pool.backward(np.ones((1, 1, 2, 2), dtype=np.float32), fp, BackwardStep(iteration=0))
    expected = np.zeros((4, 4), dtype=np.float32)
    expected[1, 1] = expected[1, 3] = expected[2, 0] = expected[3, 3] = 1.0
    assert np.array_equal(g[0, 0], expected)


def test_maxpool_drops_trailing_rows():
    pool = MaxPool2d("maxpool0", 2)
    fp = ForwardPass()
    x = np.random.default_rng(0).random((1, 2, 5, 5)).astype(np.float32)
    assert pool.forward(x, fp).shape == (1, 2, 2, 2)
    g = pool.backward(np.ones((1, 2, 2, 2), dtype=np.float32), fp, BackwardStep(iteration=0))
    assert g.shape == (1, 2, 5, 5)
    assert not g[:, :, 4, :].any() and not g[:, :, :, 4].any()


def test_softmax_cross_entropy():
    loss, grad = softmax_cross_entropy(np.zeros((4, 10), dtype=np.float32), np.array([0, 1, 2, 3]))
    assert loss == pytest.approx(math.log(10))
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-7)
    assert grad[0, 0] == pytest.approx((0.1 - 1.0) / 4)


def test_float_backward_matches_finite_differences_on_classifier_bias(model, batch):
    labels = np.arange(6) % 10
    fp = ForwardPass()
    _, g_logits = softmax_cross_entropy(model.forward(batch, fp), labels)
    step = BackwardStep(iteration=0)
    model.backward(g_logits, fp, step)
    linear = model.layers[-1]
    analytic = linear.grads["bias"].astype(np.float64)

    h = 1e-2
    bias = linear.params["bias"].copy()
    for j in range(3):
        shifted = []
        for sign in (1, -1):
            b = bias.copy()
            b[j] += sign * h
            linear.params["bias"] = b
            shifted.append(softmax_cross_entropy(model.forward(batch, ForwardPass()), labels)[0])
        linear.params["bias"] = bias
        assert (shifted[0] - shifted[1]) / (2 * h) == pytest.approx(analytic[j], rel=1e-2, abs=1e-4)


def test_quantized_backward_updates_every_conv(model, batch):
    labels = np.arange(6) % 10
    fp = ForwardPass(quantized=model.quantized_layer_names(PrecisionMode.INT8_DA))
    _, g_logits = softmax_cross_entropy(model.forward(batch, fp), labels)
    state = ClipState()
    step = BackwardStep(iteration=0, rounding_seed=3, scaling=GradientScaling.DA, state=state,
                        hyper=MCSHyper(), alpha=0.2)
    model.backward(g_logits, fp, step)
    assert state.topology() == model.conv_topology()
    assert set(step.traces) == set(model.conv_names())
    for layer in model.conv_layers:
        assert layer.grads["weight"].shape == layer.params["weight"].shape
        assert step.traces[layer.name].error_active is not None


def test_load_state_arrays_rejects_mismatch(model):
    arrays = model.state_arrays()
    arrays.pop("linear0.bias")
    with pytest.raises(CheckpointError):
        model.load_state_arrays(arrays)
    arrays = model.state_arrays()
    arrays["linear0.bias"] = np.zeros(3, dtype=np.float32)
    with pytest.raises(CheckpointError):
        model.load_state_arrays(arrays)
