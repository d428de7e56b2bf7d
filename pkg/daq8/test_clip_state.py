import io

import numpy as np
import pytest
from pydantic import ValidationError

from daq8.clip_state import (
    SECTION,
    ClipState,
    LayerClip,
    MCSHyper,
    decode_clip_state,
    encode_clip_state,
    load_state,
    save_state,
    update_channel_scale,
    update_layer,
)
from daq8.errors import CheckpointError, DegenerateSliceError, DimensionError
from daq8.grad_stats import ChannelStats, DistributionClass
from daq8.utils_checkpoints import encode_container

G = DistributionClass.GAUSSIAN
T = DistributionClass.INVERTED_T
HYPER = MCSHyper()


def _stats(g_max: float) -> ChannelStats:
    return ChannelStats(g_max=g_max, sigma=g_max / 3, mu=0.0, tail_fraction=0.2, count=10)


def _zero() -> ChannelStats:
    return ChannelStats(g_max=0.0, sigma=0.0, mu=0.0, tail_fraction=0.0, count=10)


class TestHyper:
    def test_defaults(self):
        assert (HYPER.k, HYPER.A, HYPER.lam) == (1.0, 0.8, 0.3)
        assert HYPER.decay == pytest.approx(0.2)

    def test_lambda_alias(self):
        assert MCSHyper.model_validate({"lambda": 0.25}).lam == 0.25

    def test_oscillating_recurrence_rejected(self):
        with pytest.raises(ValidationError):
            MCSHyper(k=1.5, A=0.8)
        assert MCSHyper(k=1.5, A=0.8, allow_oscillation=True).decay == pytest.approx(-0.2)

    @pytest.mark.parametrize("fields", [{"k": 0.0}, {"A": 0.0}, {"A": 1.1}, {"lam": 1.0}])
    def test_ranges(self, fields):
        with pytest.raises(ValidationError):
            MCSHyper(**fields)


class TestChannelUpdate:
    def test_gaussian_takes_peak(self):
        assert update_channel_scale(0.9, _stats(0.37), G, HYPER) == 0.37

    def test_inverted_t_recurrence(self):
        assert update_channel_scale(1.0, _stats(0.5), T, HYPER) == pytest.approx(0.6)

    def test_first_iteration_takes_peak(self):
        assert update_channel_scale(None, _stats(0.42), T, HYPER) == 0.42

    def test_degenerate(self):
        with pytest.raises(DegenerateSliceError):
            update_channel_scale(1.0, _zero(), T, HYPER)

    def test_gaussian_is_idempotent(self):
        s = update_channel_scale(None, _stats(0.7), G, HYPER)
        assert update_channel_scale(s, _stats(0.7), G, HYPER) == s

    def test_geometric_convergence(self):
        s0, peak = 2.0, 0.5
        s = s0
        for t in range(1, 21):
            s = update_channel_scale(s, _stats(peak), T, HYPER)
            assert abs(s - peak) == pytest.approx(0.2 ** t * abs(s0 - peak), rel=1e-9, abs=1e-15)

    def test_stays_within_peak_range(self):
        rng = np.random.default_rng(0)
        s = 5.0
        for t in range(300):
            s = update_channel_scale(s, _stats(float(rng.uniform(0.2, 1.0))), T, HYPER)
            if t >= 30:
                assert 0.2 - 1e-12 <= s <= 1.0 + 1e-12

    def test_oscillation_falls_back_to_peak(self):
        hyper = MCSHyper(k=2.0, A=1.0, allow_oscillation=True)
        # decay -1: -1 * 1.0 + 0.1 < 0
        assert update_channel_scale(1.0, _stats(0.1), T, hyper) == 0.1


class TestLayerUpdate:
    def test_fresh_layer_takes_peaks(self):
        state = ClipState()
        scales = update_layer(state, "conv0", [_stats(0.3), _stats(0.9)], [T, G], HYPER)
        assert scales.dtype == np.float32
        assert scales.tolist() == pytest.approx([0.3, 0.9])
        assert state.layers["conv0"].seeded.all()

    def test_mixed_classes_match_scalar_rule(self):
        state = ClipState()
        update_layer(state, "conv0", [_stats(1.0), _stats(1.0), _stats(1.0)], [T, T, T], HYPER)
        peaks = [0.5, 0.25, 2.0]
        classes = [T, G, T]
        scales = update_layer(state, "conv0", [_stats(p) for p in peaks], classes, HYPER)
        expected = [update_channel_scale(1.0, _stats(p), c, HYPER) for p, c in zip(peaks, classes)]
        assert scales.tolist() == pytest.approx(expected, rel=1e-6)

    def test_class_switch_uses_stored_scale(self):
        state = ClipState()
        update_layer(state, "conv0", [_stats(0.4)], [G], HYPER)
        scales = update_layer(state, "conv0", [_stats(0.5)], [T], HYPER)
        assert float(scales[0]) == pytest.approx(0.2 * np.float32(0.4) + 0.8 * 0.5, rel=1e-6)

    def test_degenerate_channel_keeps_scale(self):
        state = ClipState()
        update_layer(state, "conv0", [_stats(0.3), _stats(0.6)], [G, G], HYPER)
        scales = update_layer(state, "conv0", [_zero(), _stats(0.8)], [T, G], HYPER)
        assert scales.tolist() == pytest.approx([0.3, 0.8])

    def test_unseeded_degenerate_channel(self):
        state = ClipState()
        update_layer(state, "conv0", [_zero(), _stats(0.5)], [T, T], HYPER)
        layer = state.layers["conv0"]
        assert layer.scales[0] == 1.0 and not layer.seeded[0]
        update_layer(state, "conv0", [_stats(0.25), _stats(0.5)], [T, T], HYPER)
        assert state.layers["conv0"].scales[0] == pytest.approx(0.25)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            update_layer(ClipState(), "conv0", [_stats(1.0)], [G, G], HYPER)

    def test_channel_count_change(self):
        state = ClipState()
        update_layer(state, "conv0", [_stats(1.0)], [G], HYPER)
        with pytest.raises(DimensionError):
            update_layer(state, "conv0", [_stats(1.0), _stats(1.0)], [G, G], HYPER)

    def test_iteration_is_advanced_separately(self):
        state = ClipState()
        update_layer(state, "conv0", [_stats(1.0)], [G], HYPER)
        assert state.iteration == 0
        state.advance()
        assert state.iteration == 1


class TestPersistence:
    def _state(self) -> ClipState:
        rng = np.random.default_rng(4)
        state = ClipState()
        state.layers["conv0"] = LayerClip(rng.uniform(0.01, 2, 8).astype(np.float32), rng.random(8) > 0.3)
        state.layers["conv1"] = LayerClip(rng.uniform(0.01, 2, 16).astype(np.float32), np.ones(16, bool))
        state.iteration = 1234
        return state

    def test_roundtrip_through_stream(self):
        state = self._state()
        buf = io.BytesIO()
        save_state(state, buf)
        buf.seek(0)
        assert load_state(buf, {"conv0": 8, "conv1": 16}) == state

    def test_roundtrip_through_file(self, tmp_path):
        state = self._state()
        path = tmp_path / "clip.daq8"
        save_state(state, path)
        assert load_state(path) == state

    def test_empty_state(self):
        state = ClipState()
        assert decode_clip_state(encode_clip_state(state)) == state

    def test_topology_mismatch(self):
        payload = encode_clip_state(self._state())
        with pytest.raises(CheckpointError):
            decode_clip_state(payload, {"conv0": 8, "conv1": 32})

    def test_corrupt_file(self, tmp_path):
        path = tmp_path / "clip.daq8"
        save_state(self._state(), path)
        blob = bytearray(path.read_bytes())
        blob[30] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError):
            load_state(path)

    def test_truncated_section(self):
        payload = encode_clip_state(self._state())
        with pytest.raises(CheckpointError):
            decode_clip_state(payload[:-5])

    def test_unknown_section_version(self):
        blob = encode_container({SECTION.replace("v1", "v2"): encode_clip_state(ClipState())})
        with pytest.raises(CheckpointError, match="clip_state/v2"):
            load_state(io.BytesIO(blob))
