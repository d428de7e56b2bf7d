import json

import numpy as np
import pytest

from daq8.diagnostics import HIST_BINS, bench, diagnose_gradient, parse_sizes, run_probe, write_diagnosis
from daq8.errors import DimensionError
from daq8.tensor_core import Tensor


@pytest.fixture
def normal_gradient():
    rng = np.random.default_rng(0)
    return Tensor(rng.standard_normal((100, 2, 10, 10)).astype(np.float32))


def test_standard_normal_channels_are_gaussian(normal_gradient):
    report = diagnose_gradient(normal_gradient)
    assert report["summary"]["n_gaussian"] == 2
    for ch in report["channels"]:
        assert ch.label == "gaussian"
        assert ch.tail_fraction == pytest.approx(0.3173, abs=0.02)
        assert ch.ks_gaussian < 0.03
    assert len(report["histograms"]) == 2 * HIST_BINS
    assert sum(h["count"] for h in report["histograms"]) == normal_gradient.size


def test_per_channel_error_beats_global_on_uneven_channels():
    rng = np.random.default_rng(1)
    g = rng.standard_normal((8, 3, 6, 6)) * np.array([1.0, 0.01, 0.001]).reshape(1, -1, 1, 1)
    summary = diagnose_gradient(Tensor(g.astype(np.float32)))["summary"]
    assert summary["error_gvq"] < summary["error_gq"]


def test_zero_channel_is_reported_degenerate():
    g = np.zeros((2, 2, 3, 3), dtype=np.float32)
    g[:, 0] = np.random.default_rng(2).standard_normal((2, 3, 3))
    report = diagnose_gradient(Tensor(g))
    assert report["channels"][1].label == "degenerate"
    assert report["channels"][1].ks_gaussian is None
    assert report["summary"]["n_degenerate"] == 1


def test_all_zero_tensor():
    report = diagnose_gradient(Tensor.zeros((1, 2, 2, 2)))
    assert report["summary"]["error_gq"] is None
    assert report["summary"]["n_degenerate"] == 2


def test_write_diagnosis(tmp_path, normal_gradient):
    paths = write_diagnosis(diagnose_gradient(normal_gradient), tmp_path, "layer")
    assert [p.name for p in paths] == ["layer_channels.csv", "layer_histograms.csv", "layer_summary.json"]
    header = (tmp_path / "layer_channels.csv").read_text().splitlines()[0]
    assert header.startswith("channel,label,tail_fraction")
    assert json.loads((tmp_path / "layer_summary.json").read_text())["n_gaussian"] == 2


def test_probe_report(tmp_path):
    report = run_probe(tmp_path)
    assert report["sign_match_rate"] == 1.0
    assert (tmp_path / "probe.csv").exists()
    summary = json.loads((tmp_path / "probe_summary.json").read_text())
    assert summary["rows"] == len(report["rows"])


def test_parse_sizes():
    sizes = parse_sizes("8x16x32x16x3, 4x8x8x32x1")
    assert [s.label for s in sizes] == ["8x16x32x16x3", "4x8x8x32x1"]


@pytest.mark.parametrize("text", ["", "8x16x32", "8x16x0x16x3", "axbxcxdxe"])
def test_parse_sizes_rejects(text):
    with pytest.raises(DimensionError):
        parse_sizes(text)


def test_bench_rows():
    rows = bench(parse_sizes("2x2x3x6x3"), reps=1)
    assert [r["op"] for r in rows] == ["forward", "input_grad", "weight_grad"]
    assert all(r["float_seconds"] >= 0 and r["int_seconds"] >= 0 for r in rows)
