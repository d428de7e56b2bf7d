"""
Reports behind the `diagnose` and `bench` commands.

All outputs are CSV/JSON files meant for external plotting:
- per-channel gradient diagnosis (class, tail fraction, KS statistics,
  GQ vs GVQ quantization error) plus per-channel histograms,
- derivative agreement probe for the Inverted-T clipping rule,
- float vs integer convolution timings.
"""

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from daq8.backward_quant import GLOBAL_STREAM, VECTORIZED_STREAM, weight_grad_int
from daq8.errors import DimensionError
from daq8.grad_stats import (
    DEFAULT_ALPHA,
    DistributionClass,
    classify,
    compute_layer_channel_stats,
    default_probe_grid,
    derivative_agreement_report,
    ks_against_references,
    quantization_error,
)
from daq8.quantizer import (
    NEAREST,
    StochasticRounding,
    dequantize,
    dequantize_per_channel,
    max_abs_scale,
    quantize,
    quantize_per_channel,
)
from daq8.tensor_core import (
    ConvOp,
    ConvSpec,
    Tensor,
    conv2d_backward_input,
    conv2d_backward_weight,
    conv2d_forward,
    int_conv,
    transpose_to_channel_major,
)

logger = logging.getLogger(__name__)

HIST_BINS = 41


@dataclass
class ChannelDiagnosis:
    channel: int
    label: str
    tail_fraction: float
    sigma: float
    mu: float
    g_max: float
    ks_gaussian: Optional[float]
    ks_inverted_t: Optional[float]
    error_gq: Optional[float]
    error_gvq: Optional[float]


def diagnose_gradient(g: Tensor, lam: float = 0.3, alpha: float = DEFAULT_ALPHA,
                      seed: int = 0) -> Dict:
    """
    Per-channel diagnosis of an NCHW gradient tensor.

    GQ quantizes the whole tensor with |g|_max, GVQ each channel with its own
    |g|_max; both use stochastic rounding keyed by `seed`.

    Returns:
        {"channels": [ChannelDiagnosis...], "histograms": [...], "summary": {...}}
    """
    stats_ = compute_layer_channel_stats(g)
    global_scale = max_abs_scale(g.data)
    gq_hat = gvq_hat = None
    if global_scale is not None:
        gq_hat = dequantize(quantize(g, global_scale, StochasticRounding(seed, stream=GLOBAL_STREAM))).data
        peaks = np.array([s.g_max if not s.is_degenerate else 1.0 for s in stats_], dtype=np.float32)
        vq = quantize_per_channel(transpose_to_channel_major(g), peaks,
                                  StochasticRounding(seed, stream=VECTORIZED_STREAM))
        gvq_hat = dequantize_per_channel(vq).data.transpose(1, 0, 2, 3)

    channels: List[ChannelDiagnosis] = []
    histograms: List[Dict] = []
    limit = global_scale.s if global_scale is not None else 1.0
    edges = np.linspace(-limit, limit, HIST_BINS + 1)
    for c, s in enumerate(stats_):
        values = g.data[:, c]
        if s.is_degenerate:
            label, ks = "degenerate", {"ks_gaussian": None, "ks_inverted_t": None}
        else:
            label, ks = classify(s, lam).value, ks_against_references(values, alpha)
        channels.append(ChannelDiagnosis(
            channel=c, label=label, tail_fraction=s.tail_fraction, sigma=s.sigma, mu=s.mu, g_max=s.g_max,
            ks_gaussian=ks["ks_gaussian"], ks_inverted_t=ks["ks_inverted_t"],
            error_gq=quantization_error(values, gq_hat[:, c], alpha) if gq_hat is not None else None,
            error_gvq=quantization_error(values, gvq_hat[:, c], alpha) if gvq_hat is not None else None,
        ))
        counts, _ = np.histogram(values, bins=edges)
        histograms.extend({"channel": c, "bin_lo": float(lo), "bin_hi": float(hi), "count": int(n)}
                          for lo, hi, n in zip(edges[:-1], edges[1:], counts))

    summary = {
        "shape": list(g.shape),
        "lambda": lam,
        "alpha": alpha,
        "n_gaussian": sum(1 for ch in channels if ch.label == DistributionClass.GAUSSIAN.value),
        "n_inverted_t": sum(1 for ch in channels if ch.label == DistributionClass.INVERTED_T.value),
        "n_degenerate": sum(1 for ch in channels if ch.label == "degenerate"),
        "error_gq": quantization_error(g, gq_hat, alpha) if gq_hat is not None else None,
        "error_gvq": quantization_error(g, gvq_hat, alpha) if gvq_hat is not None else None,
    }
    return {"channels": channels, "histograms": histograms, "summary": summary}


def write_rows(path: Path, rows: Sequence[Dict]) -> Path:
    """CSV with a header taken from the first row; floats written with repr()."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        if rows:
            writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()), lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                                 for k, v in row.items()})
    return path


def write_diagnosis(report: Dict, out_dir: Path, prefix: str) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [
        write_rows(out_dir / f"{prefix}_channels.csv", [asdict(ch) for ch in report["channels"]]),
        write_rows(out_dir / f"{prefix}_histograms.csv", report["histograms"]),
    ]
    summary_path = out_dir / f"{prefix}_summary.json"
    with open(summary_path, "w", encoding="utf-8") as f:
        json.dump(report["summary"], f, indent=2)
    paths.append(summary_path)
    return paths


def run_probe(out_dir: Path) -> Dict:
    """Closed-form vs quadrature dE/ds on the default grid; writes probe.csv and probe_summary.json."""
    report = derivative_agreement_report(default_probe_grid())
    out_dir = Path(out_dir)
    write_rows(out_dir / "probe.csv", report["rows"])
    summary = {k: v for k, v in report.items() if k != "rows"}
    summary["rows"] = len(report["rows"])
    with open(out_dir / "probe_summary.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)
    return report


@dataclass(frozen=True)
class BenchSize:
    """One benchmark case: batch, input channels, output channels, square input extent, kernel."""

    n: int
    c_in: int
    c_out: int
    hw: int
    k: int

    @property
    def label(self) -> str:
        return f"{self.n}x{self.c_in}x{self.c_out}x{self.hw}x{self.k}"


def parse_sizes(text: str) -> List[BenchSize]:
    """'8x16x32x16x3,4x8x8x32x3' -> BenchSize list (N x C_in x C_out x HW x k)."""
    sizes = []
    for item in filter(None, (part.strip() for part in text.split(","))):
        parts = item.lower().split("x")
        if len(parts) != 5 or not all(p.isdigit() and int(p) > 0 for p in parts):
            raise DimensionError(f"bench size '{item}' is not N x C_in x C_out x HW x k")
        sizes.append(BenchSize(*(int(p) for p in parts)))
    if not sizes:
        raise DimensionError("no bench sizes given")
    return sizes


def _median_seconds(fn, reps: int) -> float:
    times = []
    for _ in range(reps):
        started = time.perf_counter()
        fn()
        times.append(time.perf_counter() - started)
    return float(np.median(times))


def bench(sizes: Sequence[BenchSize], reps: int = 5, seed: int = 0) -> List[Dict]:
    """Median wall-clock seconds per conv, float path vs integer path."""
    rng = np.random.default_rng(seed)
    rows = []
    for size in sizes:
        spec = ConvSpec.square(size.k, 1, size.k // 2)
        x = Tensor.wrap(rng.standard_normal((size.n, size.c_in, size.hw, size.hw)).astype(np.float32))
        w = Tensor.wrap(rng.standard_normal((size.c_out, size.c_in, size.k, size.k)).astype(np.float32))
        ho, wo = spec.output_hw(size.hw, size.hw)
        g = Tensor.wrap(rng.standard_normal((size.n, size.c_out, ho, wo)).astype(np.float32))
        xq = quantize(x, max_abs_scale(x.data), NEAREST).data
        wq = quantize(w, max_abs_scale(w.data), NEAREST).data
        gq = quantize(g, max_abs_scale(g.data), NEAREST).data
        x_cm = np.ascontiguousarray(xq.transpose(1, 0, 2, 3))
        g_cm = np.ascontiguousarray(gq.transpose(1, 0, 2, 3))
        cases = {
            "forward": (lambda: conv2d_forward(x, w, spec),
                        lambda: int_conv(xq, wq, spec, ConvOp.FORWARD)),
            "input_grad": (lambda: conv2d_backward_input(g, w, spec, (size.hw, size.hw)),
                           lambda: int_conv(gq, wq, spec, ConvOp.INPUT_GRAD, (size.hw, size.hw))),
            "weight_grad": (lambda: conv2d_backward_weight(x, g, spec),
                            lambda: weight_grad_int(x_cm, g_cm, spec)),
        }
        for op, (float_fn, int_fn) in cases.items():
            float_s = _median_seconds(float_fn, reps)
            int_s = _median_seconds(int_fn, reps)
            rows.append({"size": size.label, "op": op, "float_seconds": float_s, "int_seconds": int_s})
            logger.info(f"{size.label:>18} {op:<12} float {float_s * 1e3:9.3f} ms   int {int_s * 1e3:9.3f} ms")
    return rows
