"""Command-line harness: train, eval, calibrate, export, report.

All artifact writes are atomic (temp file + rename) and contain no
timestamps, so reruns with the same seed produce identical bytes.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

from . import numerics
from .bundle import export_bundle
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, DatasetSpec, RunConfig
from .metrics import (atomic_write_text, eval_summary_json, histogram_from_metrics,
                      read_eval_summary, read_metrics_csv)
from .network import MissingBankError
from .serialize import CorruptFileError
from .training import Trainer, delta_b, load_dataset


def _parse_bits(text: str) -> list[int]:
    try:
        return [int(b) for b in text.split(",") if b]
    except ValueError:
        raise ConfigError(f"--bits expects a comma-separated list, got {text!r}") from None


def _apply_overrides(config: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        config.seed = args.seed
    if args.deterministic is not None:
        config.deterministic = args.deterministic
    return config.validate()


def _write_run_outputs(out_dir: str, trainer: Trainer, accuracies: dict[int, float]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(os.path.join(out_dir, "metrics.csv"), trainer.log.metrics_csv_text())
    atomic_write_text(os.path.join(out_dir, "teacher_histogram.csv"),
                      trainer.log.histogram_csv_text())
    atomic_write_text(
        os.path.join(out_dir, "eval_summary.json"),
        eval_summary_json(accuracies, trainer.calibrated_bits, trainer.config.mode),
    )
    save_checkpoint(os.path.join(out_dir, "checkpoint.ckpt"), trainer)


def cmd_train(args) -> int:
    config = _apply_overrides(RunConfig.load(args.config), args)
    if args.resume:
        trainer = load_checkpoint(args.resume)
        if trainer.config.to_json() != config.to_json():
            raise ConfigError("--resume checkpoint was produced by a different config")
    else:
        trainer = Trainer(config)
    accuracies = trainer.run()
    _write_run_outputs(args.out, trainer, accuracies)
    for b in sorted(accuracies, reverse=True):
        print(f"bit-width {b}: {accuracies[b]:.2f}%")
    return 0


def cmd_eval(args) -> int:
    trainer = load_checkpoint(args.ckpt)
    if args.seed is not None or args.deterministic is not None:
        _apply_overrides(trainer.config, args)
    accuracies = {b: trainer.evaluate(b) for b in _parse_bits(args.bits)}
    text = eval_summary_json(accuracies, trainer.calibrated_bits, trainer.config.mode)
    if args.out:
        atomic_write_text(args.out, text)
    print(text, end="")
    return 0


def _calibration_dataset(trainer: Trainer, spec_arg: str | None):
    if not spec_arg or spec_arg == "train":
        return None  # trainer falls back to its own training split
    with open(spec_arg, "r", encoding="utf-8") as f:
        spec = DatasetSpec.from_dict(json.load(f))
    train, _ = load_dataset(spec)
    return train


def cmd_calibrate(args) -> int:
    trainer = load_checkpoint(args.ckpt)
    data = _calibration_dataset(trainer, args.data)
    for b in _parse_bits(args.bits):
        trainer.calibrate(b, dataset=data)
        print(f"calibrated bit-width {b}")
    save_checkpoint(args.out or args.ckpt, trainer)
    return 0


def cmd_export(args) -> int:
    trainer = load_checkpoint(args.ckpt)
    report = export_bundle(args.out, trainer.net)
    print(f"wrote {args.out}: {report.total} bytes "
          f"(codes {report.code_payload}, fp weights {report.fp_weight_payload}, "
          f"banks {report.bank_payload}, framing {report.framing})")
    return 0


def cmd_report(args) -> int:
    config, rows = read_metrics_csv(args.metrics)
    out_dir = args.out or os.path.dirname(os.path.abspath(args.metrics))
    os.makedirs(out_dir, exist_ok=True)

    hist_rows = histogram_from_metrics(rows)
    hist = io.StringIO()
    writer = csv.writer(hist, lineterminator="\n")
    writer.writerow(("epoch", "student_b", "teacher_b", "count"))
    writer.writerows(hist_rows)
    atomic_write_text(os.path.join(out_dir, "report_teacher_histogram.csv"), hist.getvalue())

    summary_path = args.summary or os.path.join(
        os.path.dirname(os.path.abspath(args.metrics)), "eval_summary.json")
    table_rows = []
    delta = None
    if os.path.exists(summary_path):
        summary = read_eval_summary(summary_path)
        reference = read_eval_summary(args.reference)["bits"] if args.reference else {}
        for b_str in sorted(summary["bits"], key=int, reverse=True):
            info = summary["bits"][b_str]
            ref_acc = reference.get(b_str, {}).get("accuracy")
            ratio = 100.0 * info["accuracy"] / ref_acc if ref_acc else None
            table_rows.append((b_str, info["accuracy"], info["zero_shot"], ref_acc, ratio))
        if args.reference:
            common = {
                int(b): summary["bits"][b]["accuracy"]
                for b in summary["bits"]
                if b in reference and not summary["bits"][b]["zero_shot"]
            }
            if common:
                delta = delta_b(common, {b: reference[str(b)]["accuracy"] for b in common})
    table = io.StringIO()
    writer = csv.writer(table, lineterminator="\n")
    writer.writerow(("b", "accuracy", "zero_shot", "reference_accuracy", "ratio_percent"))
    for row in table_rows:
        writer.writerow(["" if v is None else v for v in row])
    if delta is not None:
        writer.writerow(("delta_b", "", "", "", repr(delta)))
    atomic_write_text(os.path.join(out_dir, "report_table.csv"), table.getvalue())

    for row in table_rows:
        tag = " (zero-shot)" if row[2] else ""
        print(f"bit-width {row[0]}: {row[1]:.2f}%{tag}")
    if delta is not None:
        print(f"delta_b = {delta}")
    print(f"report written to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flexquant",
        description="Train and run a single network at multiple bit-widths.",
    )
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    det = parser.add_mutually_exclusive_group()
    det.add_argument("--deterministic", dest="deterministic", action="store_true",
                     default=None, help="force deterministic execution (the default)")
    det.add_argument("--no-deterministic", dest="deterministic", action="store_false",
                     default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a run from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--out", default="run", help="output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint at given bit-widths")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bits", required=True, help="comma-separated, e.g. 8,4,2")
    p.add_argument("--out", default=None, help="write the summary JSON here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("calibrate", help="zero-shot BN calibration for missing bit-widths")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bits", required=True)
    p.add_argument("--data", default=None,
                   help="DatasetSpec JSON file, or 'train' for the run's own data")
    p.add_argument("--out", default=None, help="write the updated checkpoint here")
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("export", help="write a deployment bundle")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export)

    p = sub.add_parser("report", help="per-bit table and teacher histograms from metrics")
    p.add_argument("--metrics", required=True)
    p.add_argument("--summary", default=None, help="eval summary JSON (default: sibling)")
    p.add_argument("--reference", default=None,
                   help="eval summary JSON of individual-quantization runs")
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    numerics.set_finite_checks(True)
    try:
        return args.fn(args)
    except (ConfigError, MissingBankError, CorruptFileError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
