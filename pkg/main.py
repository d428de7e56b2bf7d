#!/usr/bin/env python3
"""
daq8 command line.

Subcommands:
    train     run one training job (metrics + checkpoint in --out)
    compare   FP32 vs INT8 twins on shared seeds; --ablate adds GQ/GVQ/MCS, --hyper-grid sweeps (k, A)
    diagnose  per-channel gradient diagnosis of a tensor dump or a configured run; --probe for dE/ds
    bench     float vs integer convolution timings
    dump      write tensor dumps of weights, clipping scales or layer gradients from a checkpoint

Exit codes: 0 ok, 1 training diverged / other engine error, 2 usage,
3 I/O or format error, 4 contract violation.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from daq8 import config
from daq8.clip_state import SECTION as CLIP_SECTION
from daq8.clip_state import decode_clip_state
from daq8.diagnostics import bench, diagnose_gradient, parse_sizes, run_probe, write_diagnosis, write_rows
from daq8.errors import (
    CheckpointError,
    ConfigError,
    ContractViolation,
    Daq8Error,
    DegenerateSliceError,
    DimensionError,
    DomainError,
    FormatError,
    OverflowRiskError,
    TrainingDivergedError,
)
from daq8.grad_stats import DEFAULT_ALPHA
from daq8.tensor_core import Tensor, load_tensor, save_tensor
from daq8.training.config import PrecisionMode, Seeds, TrainConfig, default_config, load_config
from daq8.training.trainer import (
    MODEL_SECTION,
    collect_layer_gradients,
    compare,
    grid_spread_pp,
    hyper_grid,
    summarize,
    train,
)
from daq8.utils_checkpoints import decode_arrays, read_container, require_section
from daq8.utils_logging import setup_logger

EXIT_OK = 0
EXIT_ENGINE = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_CONTRACT = 4

CONTRACT_ERRORS = (ContractViolation, DimensionError, DomainError, OverflowRiskError, ConfigError,
                   DegenerateSliceError)


def _resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else default_config(args.seed if args.seed is not None else 0)
    changes = {}
    if args.seed is not None:
        changes["seeds"] = Seeds.from_base(args.seed)
    if getattr(args, "mode", None):
        changes["mode"] = args.mode
    if getattr(args, "epochs", None) is not None:
        changes["epochs"] = args.epochs
    return cfg.with_overrides(**changes) if changes else cfg


def _as_rank4(arr: np.ndarray) -> Tensor:
    return Tensor(arr.reshape((1,) * (4 - arr.ndim) + arr.shape))


def cmd_train(args) -> int:
    cfg = None if (args.resume and not args.config) else _resolve_config(args)
    result = train(cfg, args.out, resume_from=args.resume, stop_after_iterations=args.stop_after)
    final = result.final
    print("=" * 70)
    print("TRAINING COMPLETE" if result.completed else "TRAINING STOPPED")
    print("=" * 70)
    print(f"  Iterations:  {result.iterations}")
    if final is not None:
        print(f"  Train acc:   {final.train_acc:.4f}")
        if final.val_acc is not None:
            print(f"  Val acc:     {final.val_acc:.4f}")
    print(f"  Checkpoint:  {result.checkpoint}")
    print(f"  Metrics:     {Path(args.out) / 'metrics.csv'}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _resolve_config(args)
    if args.hyper_grid:
        rows = hyper_grid(cfg, args.out, args.seeds)
        print("=" * 70)
        print("HYPER-PARAMETER GRID (int8-da)")
        print("=" * 70)
        for entry in summarize(rows, key="cell"):
            acc = "diverged" if entry["median_acc"] is None else f"{entry['median_acc']:.4f}"
            print(f"  {entry['cell']:<12} median acc {acc}")
        spread = grid_spread_pp(rows)
        print(f"\n  Spread: {'n/a (divergence)' if spread is None else f'{spread:.2f} pp'}")
        return EXIT_OK

    rows = compare(cfg, args.out, ablate=args.ablate, seeds=args.seeds)
    summary = summarize(rows)
    write_rows(Path(args.out) / "compare_summary.csv", summary)
    print("=" * 70)
    print("COMPARISON (delta = mode - fp32, percentage points)")
    print("=" * 70)
    for entry in summary:
        print(f"  {entry['mode']:<10} median acc {entry['median_acc']:.4f}   "
              f"median delta {entry['median_delta_pp']:+.2f} pp   ({entry['runs']} runs)")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    out = Path(args.out)
    if args.probe:
        report = run_probe(out)
        print(f"✓ Derivative probe: {len(report['rows'])} rows, sign match rate "
              f"{report['sign_match_rate']:.3f}, median ratio {report['median_ratio']:.4f}")
    if args.dump:
        g = load_tensor(args.dump)
        report = diagnose_gradient(g, lam=args.lam, alpha=args.alpha)
        write_diagnosis(report, out, Path(args.dump).stem)
        _print_diagnosis(Path(args.dump).stem, report)
    if args.config:
        cfg = _resolve_config(args)
        result = train(cfg, out / "run", stop_after_iterations=args.iterations)
        gradients = collect_layer_gradients(result.checkpoint)
        for layer, grads in gradients.items():
            report = diagnose_gradient(Tensor(grads["g_y"]), lam=args.lam, alpha=args.alpha)
            write_diagnosis(report, out, layer)
            _print_diagnosis(layer, report)
    return EXIT_OK


def _print_diagnosis(name: str, report) -> None:
    s = report["summary"]
    err_gq = "n/a" if s["error_gq"] is None else f"{s['error_gq']:.6g}"
    err_gvq = "n/a" if s["error_gvq"] is None else f"{s['error_gvq']:.6g}"
    print(f"  {name}: gaussian {s['n_gaussian']}, inverted-t {s['n_inverted_t']}, "
          f"degenerate {s['n_degenerate']}, E(GQ) {err_gq}, E(GVQ) {err_gvq}")
    for ch in report["channels"][:8]:
        print(f"    ch{ch.channel:<3} {ch.label:<11} tail {ch.tail_fraction:.4f}")


def cmd_bench(args) -> int:
    rows = bench(parse_sizes(args.sizes), reps=args.reps)
    path = write_rows(Path(args.out) / "bench.csv", rows)
    print(f"✓ Wrote {len(rows)} timings to {path}")
    return EXIT_OK


def cmd_dump(args) -> int:
    out = Path(args.out)
    written: List[Path] = []
    if args.what == "weights":
        sections = read_container(args.checkpoint)
        for name, arr in decode_arrays(require_section(sections, MODEL_SECTION)).items():
            written.append(save_tensor(out / "weights" / f"{name}.daq8t", _as_rank4(arr)))
    elif args.what == "clip_state":
        sections = read_container(args.checkpoint)
        state = decode_clip_state(require_section(sections, CLIP_SECTION))
        summary = {"iteration": state.iteration, "layers": {}}
        for name, layer in state.layers.items():
            written.append(save_tensor(out / "clip_state" / f"{name}.daq8t", _as_rank4(layer.scales)))
            summary["layers"][name] = {"scales": [float(s) for s in layer.scales],
                                       "seeded": [bool(b) for b in layer.seeded]}
        (out / "clip_state").mkdir(parents=True, exist_ok=True)
        with open(out / "clip_state" / "clip_state.json", "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=2)
    else:
        for name, grads in collect_layer_gradients(args.checkpoint).items():
            written.append(save_tensor(out / "grads" / f"{name}_g_y.daq8t", Tensor(grads["g_y"])))
            written.append(save_tensor(out / "grads" / f"{name}_g_w.daq8t", Tensor(grads["g_w"])))
    print(f"✓ Wrote {len(written)} tensor dumps under {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="daq8", description="Distribution adaptive INT8 training engine")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_config: bool = True):
        p.add_argument("--out", type=Path, default=config.DAQ8_OUT_DIR, help="output directory")
        if with_config:
            p.add_argument("--config", type=Path, help="JSON TrainConfig file")
            p.add_argument("--seed", type=int, help="base seed (init, shuffle, rounding, data = seed .. seed+3)")
            p.add_argument("--epochs", type=int, help="override epochs")

    p = sub.add_parser("train", help="run one training job")
    common(p)
    p.add_argument("--mode", choices=[m.value for m in PrecisionMode])
    p.add_argument("--resume", type=Path, help="checkpoint to resume from")
    p.add_argument("--stop-after", type=int, dest="stop_after", help="stop after N iterations")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("compare", help="FP32 vs INT8 twins on shared seeds")
    common(p)
    p.add_argument("--ablate", action="store_true", help="also run int8-gq, int8-gvq and int8-mcs")
    p.add_argument("--seeds", type=int, nargs="+", help="base seeds to repeat the comparison over")
    p.add_argument("--hyper-grid", action="store_true", dest="hyper_grid",
                   help="sweep (k, A) over {1.0,1.2,1.5} x {0.5,0.8} instead")
    p.set_defaults(handler=cmd_compare)

    p = sub.add_parser("diagnose", help="per-channel gradient diagnosis")
    common(p)
    p.add_argument("--mode", choices=[m.value for m in PrecisionMode])
    p.add_argument("--dump", type=Path, help="tensor dump of an NCHW gradient")
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA, help="magnitude exponent of the error metric")
    p.add_argument("--lambda", type=float, default=0.3, dest="lam", help="discriminator threshold")
    p.add_argument("--iterations", type=int, default=0, help="train this many iterations before diagnosing --config")
    p.add_argument("--probe", action="store_true", help="closed-form vs numerical dE/ds agreement report")
    p.set_defaults(handler=cmd_diagnose)

    p = sub.add_parser("bench", help="float vs integer conv timings")
    common(p, with_config=False)
    p.add_argument("--sizes", default="8x8x16x16x3,32x16x32x16x3",
                   help="comma-separated N x C_in x C_out x HW x k")
    p.add_argument("--reps", type=int, default=5)
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("dump", help="tensor dumps from a checkpoint")
    common(p, with_config=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--what", choices=["weights", "clip_state", "grads"], required=True)
    p.set_defaults(handler=cmd_dump)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "diagnose" and not (args.dump or args.config or args.probe):
        parser.error("diagnose needs --dump, --config or --probe")
    if args.command == "diagnose" and args.dump and args.config:
        parser.error("--dump and --config are mutually exclusive")
    if getattr(args, "reps", 1) < 1:
        parser.error("--reps must be >= 1")
    if args.command == "train" and args.resume and not args.config:
        ignored = [flag for flag, value in (("--mode", args.mode), ("--seed", args.seed), ("--epochs", args.epochs))
                   if value is not None]
        if ignored:
            parser.error(f"{', '.join(ignored)} need --config when resuming; the stored config is used otherwise")

    logger = setup_logger("daq8", log_dir=Path(args.out) / config.LOG_DIR)
    try:
        return args.handler(args)
    except (FormatError, CheckpointError, OSError) as e:
        print(f"✗ Error: {e}")
        logger.error(f"{args.command} failed: {e}")
        return EXIT_IO
    except CONTRACT_ERRORS as e:
        print(f"✗ Error: {e}")
        logger.error(f"{args.command} failed: {e}")
        return EXIT_CONTRACT
    except TrainingDivergedError as e:
        print(f"✗ Error: {e}")
        return EXIT_ENGINE
    except Daq8Error as e:
        print(f"✗ Error: {e}")
        logger.error(f"{args.command} failed: {e}")
        return EXIT_ENGINE


if __name__ == "__main__":
    sys.exit(main())
