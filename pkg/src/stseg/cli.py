"""Command-line entry point: ``stseg gen-data | train | eval | validate``.

Exit codes: 0 success, 1 failed validation check, 2 invalid configuration,
3 I/O failure, 4 non-finite training loss, 5 checkpoint/dataset mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import Checkpoint
from .config import DecoderConfig, TrainConfig, load_run_config, write_effective_config
from .datagen import DatasetIOError, benchmark_specs, default_class_names, generate_many, read_dataset, write_dataset
from .errors import CheckpointError, ConfigurationError, ShapeError, TrainingDivergedError, ValidationError
from .metrics import percent_difference, read_report_csv
from .training import evaluate, train
from .validate import SUITES

log = logging.getLogger("stseg")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_MISMATCH = 0, 1, 2, 3, 4, 5
THREADS_ENV = "STSEG_THREADS"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def resolve_threads(flag: int | None) -> int:
    """``--threads`` wins, then ``$STSEG_THREADS``, then 1."""
    if flag is not None:
        value: Any = flag
    else:
        value = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(value)
    except ValueError:
        raise ConfigurationError(f"{THREADS_ENV} must be an integer, got {value!r}") from None
    if n < 1:
        raise ConfigurationError(f"thread count must be >= 1, got {n}")
    return n


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args: argparse.Namespace) -> int:
    overrides = {
        "dataset": {
            "seed": args.seed,
            "num_classes": args.num_classes,
            "width": args.width,
            "height": args.height,
            "num_frames": args.num_frames,
            "num_train": args.num_train,
            "num_val": args.num_val,
            "num_test": args.num_test,
            "noise_sigma": args.noise_sigma,
            "ambiguity": args.ambiguity,
            "occluder_duty": args.occluder_duty,
        }
    }
    cfg = load_run_config(args.config, overrides)
    threads = resolve_threads(args.threads)
    items = benchmark_specs(cfg["dataset"])
    sequences = generate_many([(sid, spec) for sid, _, spec in items], threads=threads)
    num_classes = cfg["dataset"]["num_classes"]
    out = Path(args.out)
    write_dataset(
        sequences,
        out,
        [split for _, split, _ in items],
        default_class_names(num_classes),
        specs=[spec for _, _, spec in items],
        threads=threads,
    )
    try:
        write_effective_config(cfg, out / "gen_data_config.json")
    except OSError as exc:
        raise DatasetIOError(f"writing config echo: {exc}") from exc

    counts = {s: sum(1 for _, sp, _ in items if sp == s) for s in ("train", "val", "test")}
    print(f"wrote {len(sequences)} sequences to {out} (train {counts['train']}, val {counts['val']}, test {counts['test']})")
    hist = np.zeros(num_classes, dtype=np.int64)
    for seq in sequences:
        hist += np.bincount(seq.masks.ravel(), minlength=num_classes)[:num_classes]
    total = hist.sum()
    print("class histogram (pixels):")
    for name, n in zip(default_class_names(num_classes), hist):
        print(f"  {name:<12} {int(n):>10d}  {100.0 * n / total:6.2f}%")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args: argparse.Namespace) -> int:
    overrides = {
        "model": {
            "num_layers": args.num_layers,
            "kernel_t": args.kernel_t,
            "feature_size": args.feature_size,
            "temporal_window": args.temporal_window,
        },
        "train": {
            "epochs": args.epochs,
            "samples_per_epoch": args.samples_per_epoch,
            "batch_size": args.batch_size,
            "max_lr": args.max_lr,
            "seed": args.seed,
            "hflip_p": args.hflip_p,
            "freeze_encoder": True if args.freeze_encoder else None,
            "encoder_init": args.encoder_init,
        },
    }
    cfg = load_run_config(args.config, overrides)
    threads = resolve_threads(args.threads)
    dataset = read_dataset(args.data, splits=["train", "val"])
    model_cfg = DecoderConfig.from_dict({**cfg["model"], "num_classes": dataset.num_classes})
    train_cfg = TrainConfig(data=str(args.data), out=str(args.out), model=model_cfg, **cfg["train"])
    kind = "single_frame" if args.baseline else "sptcn"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_effective_config(cfg, out / "train_config.json")
    with threadpool_limits(limits=threads):
        result = train(train_cfg, kind=kind, dataset=dataset, resume=args.resume)
    print(f"trained {kind} model for {result.epochs_run} epochs ({len(result.log)} logged steps)")
    if result.val_losses:
        print(f"best validation loss: {result.best_val_loss:.6f}")
    for label, path in (("best", result.best_path), ("last", result.last_path)):
        if path is not None:
            print(f"{label} checkpoint: {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args: argparse.Namespace) -> int:
    if args.checkpoint is None and not args.oracle:
        raise ConfigurationError("eval needs --checkpoint unless --oracle is given")
    threads = resolve_threads(args.threads)
    ckpt = Checkpoint.load(args.checkpoint) if args.checkpoint is not None else None
    dataset = read_dataset(args.data, splits=[args.split])
    temporal_window = args.temporal_window
    if temporal_window is None and ckpt is not None:
        temporal_window = ckpt.config.temporal_window
    try:
        with threadpool_limits(limits=1):
            report = evaluate(
                None if args.oracle else ckpt,
                dataset,
                split=args.split,
                oracle=args.oracle,
                temporal_window=temporal_window,
                threads=threads,
            )
    except ConfigurationError as exc:
        raise CliError(EXIT_MISMATCH, f"checkpoint does not match dataset: {exc}") from exc

    if args.report is not None:
        report_path = Path(args.report)
        report_path.parent.mkdir(parents=True, exist_ok=True)
        report.write_csv(report_path)
        echo = {
            "checkpoint": args.checkpoint,
            "data": str(args.data),
            "split": args.split,
            "oracle": bool(args.oracle),
            "temporal_window": temporal_window,
            "model": ckpt.config.to_dict() if ckpt is not None else None,
        }
        (report_path.parent / "eval_config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    for name, iou, ni, tc, nt in report.rows():
        if name != "__mean__":
            print(f"  {name:<12} IoU {iou:.4f} (n={ni})  TC {_fmt(tc)} (n={nt})")
    for c in report.undefined_iou_classes:
        log.warning("class %s never appears in split %s; left out of the mean", report.class_names[c], args.split)
    print(f"mean IoU: {report.mean_iou:.6f}")
    print(f"mean TC: {_fmt(report.mean_tc, 6)}")

    if args.compare_to is not None:
        before = read_report_csv(args.compare_to)
        print(f"Difference (%) vs {args.compare_to} (percentage points):")
        for name, iou, _, tc, _ in report.rows():
            if name not in before:
                continue
            d_iou = percent_difference(before[name]["iou"], iou)
            d_tc = percent_difference(before[name]["tc"], tc)
            label = "mean" if name == "__mean__" else name
            print(f"  {label:<12} IoU {d_iou:+.2f}  TC {_fmt(d_tc, 2, signed=True)}")
    return EXIT_OK


def _fmt(x: float, digits: int = 4, signed: bool = False) -> str:
    if math.isnan(x):
        return "nan"
    return f"{x:+.{digits}f}" if signed else f"{x:.{digits}f}"


# ---------------------------------------------------------------------------
# validate


def cmd_validate(args: argparse.Namespace) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    failed = 0
    for name in names:
        runner = SUITES[name]
        results = runner(args.seeds) if name == "gradcheck" and args.seeds is not None else runner()
        print(f"== {name} ==")
        for r in results:
            print(r.line())
            failed += not r.passed
    print("all checks passed" if not failed else f"{failed} check(s) failed")
    return EXIT_OK if not failed else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stseg", description="Temporal video segmentation toolkit (numpy only).")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic moving-shapes benchmark")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--config", help="JSON run config (sections: dataset, model, train)")
    g.add_argument("--seed", type=int)
    g.add_argument("--num-classes", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--num-frames", type=int)
    g.add_argument("--num-train", type=int)
    g.add_argument("--num-val", type=int)
    g.add_argument("--num-test", type=int)
    g.add_argument("--noise-sigma", type=float)
    g.add_argument("--ambiguity", type=float)
    g.add_argument("--occluder-duty", type=float)
    g.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV} or 1)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the temporal model or the single-frame baseline")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="run directory for checkpoints and the loss log")
    t.add_argument("--config", help="JSON run config")
    t.add_argument("--baseline", action="store_true", help="train the single-frame baseline instead")
    t.add_argument("--resume", help="continue from a last.ckpt written by an earlier run")
    t.add_argument("--epochs", type=int)
    t.add_argument("--samples-per-epoch", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--max-lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--hflip-p", type=float)
    t.add_argument("--freeze-encoder", action="store_true", help="keep encoder weights fixed")
    t.add_argument("--encoder-init", help="checkpoint to copy encoder weights from")
    t.add_argument("--num-layers", type=int)
    t.add_argument("--kernel-t", type=int)
    t.add_argument("--feature-size", type=int)
    t.add_argument("--temporal-window", type=int)
    t.add_argument("--threads", type=int, help=f"BLAS threads (default ${THREADS_ENV} or 1)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    e.add_argument("--checkpoint", help="model checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--report", help="write the per-class CSV report here")
    e.add_argument("--oracle", action="store_true", help="score ground truth as the prediction")
    e.add_argument("--temporal-window", type=int, help="window for --oracle without a checkpoint")
    e.add_argument("--compare-to", help="earlier report CSV to print Difference (%%) against")
    e.add_argument("--threads", type=int)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("validate", help="run the built-in correctness suites")
    v.add_argument("--suite", choices=["gradcheck", "rf", "metrics", "all"], default="all")
    v.add_argument("--seeds", type=int, help="random seeds for the gradcheck suite (default 20)")
    v.set_defaults(func=cmd_validate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (ConfigurationError, ValidationError, ShapeError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
