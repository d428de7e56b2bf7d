"""
Metrics stream: one MetricsRecord per logging interval, appended to
metrics.csv and metrics.jsonl in the run directory.

CSV columns are stable for a given model: the fixed columns below, then for
every conv layer `<layer>.<field>` for each of LAYER_FIELDS. Missing values
are empty cells (CSV) or null (JSON). Floats are written with repr().
"""

import csv
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, Field

from daq8.errors import CheckpointError
from daq8.grad_stats import DistributionClass, classify, compute_layer_channel_stats, ks_against_references

logger = logging.getLogger(__name__)

FIXED_COLUMNS = ["iteration", "epoch", "lr", "loss", "train_acc", "val_acc"]
LAYER_FIELDS = ["error_active", "error_gq", "ks_gaussian", "ks_inverted_t", "n_gaussian", "n_inverted_t",
                "pairing_divergence_gw", "pairing_divergence_gx"]

CSV_NAME = "metrics.csv"
JSONL_NAME = "metrics.jsonl"


class LayerMetrics(BaseModel):
    error_active: Optional[float] = None
    error_gq: Optional[float] = None
    ks_gaussian: Optional[float] = None
    ks_inverted_t: Optional[float] = None
    n_gaussian: Optional[int] = None
    n_inverted_t: Optional[int] = None
    pairing_divergence_gw: Optional[float] = None
    pairing_divergence_gx: Optional[float] = None


class MetricsRecord(BaseModel):
    iteration: int
    epoch: int
    lr: float
    loss: float
    train_acc: float
    val_acc: Optional[float] = None
    layers: Dict[str, LayerMetrics] = Field(default_factory=dict)

    @property
    def headline_acc(self) -> float:
        return self.val_acc if self.val_acc is not None else self.train_acc


def csv_columns(layer_names: List[str]) -> List[str]:
    return FIXED_COLUMNS + [f"{name}.{f}" for name in layer_names for f in LAYER_FIELDS]


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def record_to_row(record: MetricsRecord, layer_names: List[str]) -> List[str]:
    row = [_cell(getattr(record, column)) for column in FIXED_COLUMNS]
    for name in layer_names:
        layer = record.layers.get(name, LayerMetrics())
        row.extend(_cell(getattr(layer, f)) for f in LAYER_FIELDS)
    return row


def gradient_layer_metrics(g_y: np.ndarray, lam: float, alpha: float,
                           error_active: Optional[float] = None,
                           error_gq: Optional[float] = None,
                           pairing_divergence: Optional[Dict[str, float]] = None) -> LayerMetrics:
    """
    Discriminator counts and mean per-channel KS statistics of one layer's output gradient.

    KS values average over the channels where the reference exists. pairing_divergence
    holds |s_W / s_X - 1| (g_w) and |s_X / s_W - 1| (g_x): how far the strict and
    operand scale pairings of this step would drift apart.
    """
    pairing = pairing_divergence or {}
    stats_ = compute_layer_channel_stats(g_y)
    classes = [classify(s, lam) for s in stats_ if not s.is_degenerate]
    ks_g, ks_t = [], []
    for c in range(g_y.shape[1]):
        if stats_[c].is_degenerate:
            continue
        ks = ks_against_references(g_y[:, c], alpha)
        if ks["ks_gaussian"] is not None:
            ks_g.append(ks["ks_gaussian"])
        if ks["ks_inverted_t"] is not None:
            ks_t.append(ks["ks_inverted_t"])
    return LayerMetrics(
        error_active=error_active,
        error_gq=error_gq,
        ks_gaussian=float(np.mean(ks_g)) if ks_g else None,
        ks_inverted_t=float(np.mean(ks_t)) if ks_t else None,
        n_gaussian=sum(1 for c in classes if c is DistributionClass.GAUSSIAN),
        n_inverted_t=sum(1 for c in classes if c is DistributionClass.INVERTED_T),
        pairing_divergence_gw=pairing.get("g_w"),
        pairing_divergence_gx=pairing.get("g_x"),
    )


class MetricsWriter:
    """Append-only CSV + JSON-lines writer; reopening a run appends without a second header."""

    def __init__(self, out_dir: Path, layer_names: List[str], append: bool = False):
        self.layer_names = list(layer_names)
        self.csv_path = Path(out_dir) / CSV_NAME
        self.jsonl_path = Path(out_dir) / JSONL_NAME
        self.csv_path.parent.mkdir(parents=True, exist_ok=True)
        reuse = append and self.csv_path.exists()
        if reuse:
            with open(self.csv_path, "r", newline="", encoding="utf-8") as f:
                header = next(csv.reader(f), None)
            if header != csv_columns(self.layer_names):
                raise CheckpointError(f"{self.csv_path} has different columns; cannot append")
        mode = "a" if reuse else "w"
        self._csv_file = open(self.csv_path, mode, newline="", encoding="utf-8")
        self._jsonl_file = open(self.jsonl_path, "a" if reuse else "w", encoding="utf-8")
        self._csv = csv.writer(self._csv_file, lineterminator="\n")
        if not reuse:
            self._csv.writerow(csv_columns(self.layer_names))
            self._csv_file.flush()

    def write(self, record: MetricsRecord) -> None:
        self._csv.writerow(record_to_row(record, self.layer_names))
        self._jsonl_file.write(record.model_dump_json() + "\n")
        self._csv_file.flush()
        self._jsonl_file.flush()

    def close(self) -> None:
        self._csv_file.close()
        self._jsonl_file.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_records(out_dir: Path) -> List[MetricsRecord]:
    """Parse metrics.jsonl back into records."""
    path = Path(out_dir) / JSONL_NAME
    with open(path, "r", encoding="utf-8") as f:
        return [MetricsRecord.model_validate(json.loads(line)) for line in f if line.strip()]
