"""
Training loop, checkpoints and the multi-run helpers behind `compare`.

A run is a pure function of its TrainConfig: the dataset, initial weights,
per-epoch shuffles and every stochastic rounding draw are keyed by the seeds
and the iteration counter, so a resumed run replays exactly what a
straight-through run would have done.
"""

import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from daq8.clip_state import SECTION as CLIP_SECTION
from daq8.clip_state import ClipState, MCSHyper, decode_clip_state, encode_clip_state
from daq8.diagnostics import write_rows
from daq8.errors import CheckpointError, ContractViolation, TrainingDivergedError
from daq8.grad_stats import compute_layer_channel_stats
from daq8.training.config import PrecisionMode, Seeds, TrainConfig, parse_config
from daq8.training.data import (
    LabeledSet,
    batch_indices,
    batch_order,
    eval_subset,
    iterations_per_epoch,
    load_dataset,
)
from daq8.training.metrics import LayerMetrics, MetricsRecord, MetricsWriter, gradient_layer_metrics
from daq8.training.model import BackwardStep, ForwardPass, Model, softmax_cross_entropy
from daq8.utils_checkpoints import (
    decode_arrays,
    encode_arrays,
    get_checkpoint_file,
    read_container,
    require_section,
    write_container,
)

logger = logging.getLogger(__name__)

MODEL_SECTION = "model/v1"
OPTIM_SECTION = "optim/v1"
RNG_SECTION = "rng/v1"
CONFIG_SECTION = "config/v1"
_POSITION = struct.Struct("<QII")

EVAL_BATCH = 256
COMPARE_MODES = (PrecisionMode.FP32, PrecisionMode.INT8_DA)
ABLATION_MODES = (PrecisionMode.INT8_GQ, PrecisionMode.INT8_GVQ, PrecisionMode.INT8_MCS)
GRID_K = (1.0, 1.2, 1.5)
GRID_A = (0.5, 0.8)


@dataclass
class Position:
    """Completed iterations and where the next batch comes from."""

    iteration: int = 0
    epoch: int = 0
    batch_index: int = 0


class SGD:
    """SGD with momentum; v <- mu v + (g + wd w), w <- w - lr v, all float32."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = np.float32(momentum)
        self.weight_decay = np.float32(weight_decay)
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, model: Model, lr: float) -> None:
        lr32 = np.float32(lr)
        for name, layer, key in model.named_parameters():
            grad = layer.grads[key]
            if self.weight_decay:
                grad = grad + self.weight_decay * layer.params[key]
            previous = self.velocity.get(name)
            velocity = grad.astype(np.float32) if previous is None else self.momentum * previous + grad
            self.velocity[name] = velocity.astype(np.float32)
            layer.params[key] = (layer.params[key] - lr32 * self.velocity[name]).astype(np.float32)


@dataclass
class TrainResult:
    config: TrainConfig
    out_dir: Path
    records: List[MetricsRecord] = field(default_factory=list)
    checkpoint: Optional[Path] = None
    iterations: int = 0
    completed: bool = True

    @property
    def final(self) -> Optional[MetricsRecord]:
        return self.records[-1] if self.records else None


class TrainingRun:
    """Model, optimizer, clipping state and data position of one run."""

    def __init__(self, config: TrainConfig, out_dir: Optional[Path] = None):
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.splits = load_dataset(config.dataset, config.seeds.data)
        self.model = Model(config.model, config.seeds.init)
        self.optimizer = SGD(config.momentum, config.weight_decay)
        self.state = ClipState()
        self.position = Position()
        self.quantized = self.model.quantized_layer_names(config.mode, config.exempt_first_last)
        self.iters_per_epoch = iterations_per_epoch(len(self.splits.train), config.batch_size)
        self.eval_train = eval_subset(self.splits.train, config.eval_train_samples)
        self.last_gradients: Dict[str, np.ndarray] = {}

    def clip_topology(self) -> Dict[str, int]:
        """Channels per layer held in the clipping state; whole-layer clipping keeps one."""
        topology = self.model.conv_topology()
        if self.config.mode is PrecisionMode.INT8_MCS:
            return {name: 1 for name in topology}
        return topology

    @property
    def total_iterations(self) -> int:
        return self.iters_per_epoch * self.config.epochs

    def batch(self, epoch: int, batch_index: int) -> Tuple[np.ndarray, np.ndarray]:
        order = batch_order(len(self.splits.train), self.config.seeds.shuffle, epoch)
        idx = batch_indices(order, batch_index, self.config.batch_size)
        return self.splits.train.images[idx], self.splits.train.labels[idx]

    def lr(self) -> float:
        return self.config.schedule.lr_at(self.position.epoch, self.position.batch_index,
                                          self.iters_per_epoch, self.config.epochs)

    def compute_gradients(self, images: np.ndarray, labels: np.ndarray, alpha: Optional[float] = None,
                          dump_dir: Optional[Path] = None) -> Tuple[float, BackwardStep]:
        """Forward, loss and backward on one batch; parameters are left unchanged."""
        cfg = self.config
        fp = ForwardPass(quantized=self.quantized)
        logits = self.model.forward(images, fp)
        loss, g_logits = softmax_cross_entropy(logits, labels)
        if not math.isfinite(loss):
            raise ContractViolation(f"loss is {loss}")
        step = BackwardStep(
            iteration=self.position.iteration,
            rounding_seed=cfg.seeds.rounding,
            scaling=cfg.mode.scaling,
            state=self.state,
            hyper=cfg.hyper,
            pairing=cfg.gx_pairing,
            alpha=alpha,
            dump_dir=dump_dir,
        )
        self.model.backward(g_logits, fp, step)
        return loss, step

    def train_step(self, record: bool) -> BackwardStep:
        cfg = self.config
        images, labels = self.batch(self.position.epoch, self.position.batch_index)
        lr = self.lr()
        dump_dir = None
        if record and cfg.dump_gradients and self.out_dir is not None:
            dump_dir = self.out_dir / "grads"
            dump_dir.mkdir(parents=True, exist_ok=True)
        try:
            _, step = self.compute_gradients(images, labels, cfg.alpha if record else None, dump_dir)
        except ContractViolation as e:
            raise self.diverged(str(e)) from e
        if cfg.mode.quantized:
            self.state.advance()
        self.optimizer.step(self.model, lr)
        self.last_gradients = step.gradients

        self.position.iteration += 1
        self.position.batch_index += 1
        if self.position.batch_index >= self.iters_per_epoch:
            self.position.epoch += 1
            self.position.batch_index = 0
        return step

    def diverged(self, reason: str) -> TrainingDivergedError:
        """Write the last good per-channel gradient stats and build the error."""
        layers = {name: [s.to_dict() for s in compute_layer_channel_stats(g)]
                  for name, g in self.last_gradients.items()}
        offending = max(layers, key=lambda name: max(s["g_max"] for s in layers[name]), default=None)
        message = f"training diverged at iteration {self.position.iteration}: {reason}"
        logger.error(message)
        if self.out_dir is None:
            return TrainingDivergedError(message)
        dump_path = self.out_dir / f"divergence_t{self.position.iteration}.json"
        dump = {"iteration": self.position.iteration, "reason": reason,
                "offending_layer": offending, "layers": layers}
        with open(dump_path, "w", encoding="utf-8") as f:
            json.dump(dump, f, indent=2)
        return TrainingDivergedError(message, dump_path=str(dump_path))

    def evaluate(self, data: LabeledSet) -> Tuple[Optional[float], Optional[float]]:
        """Mean loss and accuracy with the run's forward precision."""
        if len(data) == 0:
            return None, None
        total_loss, correct = 0.0, 0
        for start in range(0, len(data), EVAL_BATCH):
            images = data.images[start:start + EVAL_BATCH]
            labels = data.labels[start:start + EVAL_BATCH]
            logits = self.model.forward(images, ForwardPass(quantized=self.quantized))
            loss, _ = softmax_cross_entropy(logits, labels)
            total_loss += loss * len(labels)
            correct += int(np.count_nonzero(logits.argmax(axis=1) == labels))
        if not math.isfinite(total_loss):
            raise ContractViolation(f"evaluation loss is {total_loss}")
        return total_loss / len(data), correct / len(data)

    def record(self, step: Optional[BackwardStep], lr: float, epoch: int) -> MetricsRecord:
        try:
            loss, train_acc = self.evaluate(self.eval_train)
            _, val_acc = self.evaluate(self.splits.val)
        except ContractViolation as e:
            raise self.diverged(f"evaluation failed: {e}") from e
        layers: Dict[str, LayerMetrics] = {}
        if step is not None:
            for name in self.model.conv_names():
                if name not in step.gradients:
                    continue
                trace = step.traces.get(name)
                layers[name] = gradient_layer_metrics(
                    step.gradients[name], self.config.hyper.lam, self.config.alpha,
                    trace.error_active if trace is not None else None,
                    trace.error_gq if trace is not None else None,
                    trace.pairing_divergence if trace is not None else None,
                )
        return MetricsRecord(iteration=self.position.iteration, epoch=epoch, lr=lr, loss=loss,
                             train_acc=train_acc, val_acc=val_acc, layers=layers)

    def save(self, path: Union[str, Path]) -> Path:
        """checkpoint_save: weights, optimizer velocity, clipping state, data position, config."""
        pos = self.position
        sections = {
            MODEL_SECTION: encode_arrays(self.model.state_arrays()),
            OPTIM_SECTION: encode_arrays(self.optimizer.velocity),
            CLIP_SECTION: encode_clip_state(self.state),
            RNG_SECTION: _POSITION.pack(pos.iteration, pos.epoch, pos.batch_index),
            CONFIG_SECTION: self.config.to_json().encode("utf-8"),
        }
        write_container(path, sections)
        return Path(path)

    @classmethod
    def restore(cls, path: Union[str, Path], config: Optional[TrainConfig] = None,
                out_dir: Optional[Path] = None) -> "TrainingRun":
        """checkpoint_restore: rebuild a run exactly where save left it."""
        sections = read_container(path)
        stored = parse_config(require_section(sections, CONFIG_SECTION).decode("utf-8"))
        if config is not None and config.model_dump(mode="json") != stored.model_dump(mode="json"):
            raise CheckpointError(f"{path} was written by a different training config")
        run = cls(stored, out_dir)
        run.model.load_state_arrays(decode_arrays(require_section(sections, MODEL_SECTION)))
        velocity = decode_arrays(require_section(sections, OPTIM_SECTION))
        unknown = set(velocity) - set(run.model.state_arrays())
        if unknown:
            raise CheckpointError(f"optimizer state has unknown parameters: {', '.join(sorted(unknown))}")
        run.optimizer.velocity = velocity
        run.state = decode_clip_state(require_section(sections, CLIP_SECTION), run.clip_topology())
        position = require_section(sections, RNG_SECTION)
        if len(position) != _POSITION.size:
            raise CheckpointError(f"{RNG_SECTION} section has {len(position)} bytes, expected {_POSITION.size}")
        run.position = Position(*_POSITION.unpack(position))
        return run


def train(config: Optional[TrainConfig], out_dir: Union[str, Path], resume_from: Optional[Union[str, Path]] = None,
          stop_after_iterations: Optional[int] = None) -> TrainResult:
    """
    Run (or resume) training and write metrics plus a checkpoint to out_dir.

    Args:
        config: run configuration
        out_dir: run directory; receives metrics.csv, metrics.jsonl, checkpoint.daq8
        resume_from: checkpoint to continue from (metrics are appended)
        stop_after_iterations: interrupt once this many iterations are complete,
            checkpointing without a final record

    Returns:
        TrainResult with the records written by this call

    Raises:
        TrainingDivergedError: loss or gradients became NaN/Inf
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run = TrainingRun.restore(resume_from, config, out_dir) if resume_from else TrainingRun(config, out_dir)
    config = run.config
    checkpoint = get_checkpoint_file(out_dir)
    result = TrainResult(config=config, out_dir=out_dir, checkpoint=checkpoint)
    started = time.perf_counter()

    logger.info("=" * 70)
    logger.info(f"Training {config.mode.value}: {config.epochs} epochs x {run.iters_per_epoch} iterations, "
                f"batch {config.batch_size}, seeds {config.seeds.model_dump()}")
    if resume_from:
        logger.info(f"Resuming from {resume_from} at iteration {run.position.iteration}")
    logger.info("=" * 70)

    with MetricsWriter(out_dir, run.model.conv_names(), append=bool(resume_from)) as writer:
        def emit(record: MetricsRecord) -> None:
            writer.write(record)
            result.records.append(record)
            acc = "n/a" if record.val_acc is None else f"{record.val_acc:.4f}"
            logger.info(f"iter {record.iteration:>6}  epoch {record.epoch:>3}  lr {record.lr:.5f}  "
                        f"loss {record.loss:.4f}  train_acc {record.train_acc:.4f}  val_acc {acc}")

        if not resume_from:
            emit(run.record(None, run.lr(), 0))

        while run.position.epoch < config.epochs:
            if stop_after_iterations is not None and run.position.iteration >= stop_after_iterations:
                run.save(checkpoint)
                result.iterations = run.position.iteration
                result.completed = False
                logger.info(f"Stopped after {run.position.iteration} iterations")
                return result
            epoch = run.position.epoch
            lr = run.lr()
            upcoming = run.position.iteration + 1
            record_now = upcoming % config.metrics_every == 0 or upcoming == run.total_iterations
            step = run.train_step(record_now)
            if record_now:
                emit(run.record(step, lr, epoch))
            if config.checkpoint_every and run.position.iteration % config.checkpoint_every == 0:
                run.save(checkpoint)

    run.save(checkpoint)
    result.iterations = run.position.iteration
    elapsed = time.perf_counter() - started
    logger.info(f"✓ Finished {run.position.iteration} iterations in {elapsed:.1f}s")
    return result


def _seeded_configs(config: TrainConfig, seeds: Optional[Sequence[int]]) -> List[Tuple[int, TrainConfig]]:
    if not seeds:
        return [(config.seeds.init, config)]
    return [(seed, config.with_overrides(seeds=Seeds.from_base(seed))) for seed in seeds]


def compare(config: TrainConfig, out_dir: Union[str, Path], ablate: bool = False,
            seeds: Optional[Sequence[int]] = None) -> List[Dict]:
    """
    FP32 and INT8-DA twins (plus the ablation modes when `ablate`) on shared seeds.

    Every run lands in out_dir/seed<N>/<mode>; the table goes to out_dir/compare.csv.
    delta_pp is the mode's final accuracy minus the FP32 twin's, in percentage points.
    """
    out_dir = Path(out_dir)
    modes = COMPARE_MODES + (ABLATION_MODES if ablate else ())
    rows = []
    for label, seeded in _seeded_configs(config, seeds):
        baseline = None
        for mode in modes:
            result = train(seeded.with_overrides(mode=mode.value), out_dir / f"seed{label}" / mode.value)
            acc = result.final.headline_acc
            if mode is PrecisionMode.FP32:
                baseline = acc
            rows.append({"seed": label, "mode": mode.value, "final_acc": acc,
                         "delta_pp": 100.0 * (acc - baseline)})
    write_rows(out_dir / "compare.csv", rows)
    return rows


def summarize(rows: List[Dict], key: str = "mode") -> List[Dict]:
    """Median final accuracy and delta per group."""
    groups: Dict[str, List[Dict]] = {}
    for row in rows:
        groups.setdefault(row[key], []).append(row)
    summary = []
    for name, members in groups.items():
        accs = [r["final_acc"] for r in members if r.get("final_acc") is not None]
        entry = {key: name, "runs": len(members),
                 "median_acc": float(np.median(accs)) if accs else None}
        if "delta_pp" in members[0]:
            entry["median_delta_pp"] = float(np.median([r["delta_pp"] for r in members]))
        summary.append(entry)
    return summary


def hyper_grid(config: TrainConfig, out_dir: Union[str, Path], seeds: Optional[Sequence[int]] = None) -> List[Dict]:
    """
    INT8-DA runs over (k, A) in {1.0, 1.2, 1.5} x {0.5, 0.8}.

    Cells with k*A > 1 run with allow_oscillation. A diverged cell is recorded,
    not raised. Table goes to out_dir/hyper_grid.csv.
    """
    out_dir = Path(out_dir)
    rows = []
    for label, seeded in _seeded_configs(config, seeds):
        for k in GRID_K:
            for a in GRID_A:
                hyper = MCSHyper(k=k, A=a, lam=config.hyper.lam, allow_oscillation=k * a > 1.0)
                cell = f"k{k}_A{a}"
                try:
                    result = train(seeded.with_overrides(mode=PrecisionMode.INT8_DA.value, hyper=hyper),
                                   out_dir / f"seed{label}" / cell)
                    acc, diverged = result.final.headline_acc, False
                except TrainingDivergedError:
                    acc, diverged = None, True
                rows.append({"seed": label, "cell": cell, "k": k, "A": a, "final_acc": acc, "diverged": diverged})
    write_rows(out_dir / "hyper_grid.csv", rows)
    return rows


def grid_spread_pp(rows: List[Dict]) -> Optional[float]:
    """Spread of per-cell median accuracy, in percentage points (None if any cell diverged)."""
    if any(r["diverged"] for r in rows):
        return None
    medians = [entry["median_acc"] for entry in summarize(rows, key="cell")]
    return 100.0 * (max(medians) - min(medians))


def collect_layer_gradients(checkpoint: Union[str, Path]) -> Dict[str, Dict[str, np.ndarray]]:
    """
    Output gradient G_Y and weight gradient of every conv layer for the batch a
    checkpointed run would train on next (the first batch once training is over).
    """
    run = TrainingRun.restore(checkpoint)
    epoch, batch_index = run.position.epoch, run.position.batch_index
    if epoch >= run.config.epochs:
        epoch, batch_index = 0, 0
    images, labels = run.batch(epoch, batch_index)
    _, step = run.compute_gradients(images, labels)
    return {layer.name: {"g_y": step.gradients[layer.name], "g_w": layer.grads["weight"]}
            for layer in run.model.conv_layers}
