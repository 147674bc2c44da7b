"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error,
4 training divergence.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness
from .harness import ConfigError
from .pipeline import IngestionError, PipelineError
from .sampler import SamplerError
from .trainer import DivergedError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="subadapt",
        description="Adversarial subject-to-subject adaptation for windowed time series.")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. trainer.epochs=20")
        return p

    command("prepare", "ingest or generate data, fit transforms, persist splits")
    command("train", "run adversarial adaptation on the prepared splits")
    command("baselines", "train the no-transfer and supervised reference classifiers")
    p = command("evaluate", "score a checkpoint on the labeled target test split")
    p.add_argument("--checkpoint", default=None,
                   help="checkpoint to score (default: <output_dir>/adapted/checkpoint.json)")
    p.add_argument("--run", default="adapted", choices=list(harness.RUN_NAMES),
                   help="which standard run directory to score when --checkpoint is not given")
    p = command("synth", "emit the synthetic corpus as a frame-per-row CSV")
    p.add_argument("--out", required=True, help="destination CSV path")
    command("report", "print stored reports and rebuild the comparison table")
    return parser


def _cmd_prepare(cfg) -> int:
    splits = harness.prepare_run(cfg)
    counts = ", ".join(f"{k}={len(v)}" for k, v in splits.items())
    print(f"prepared {cfg.prepared_dir} ({counts}, dim={splits['source_train'].dim})")
    return EXIT_OK


def _cmd_train(cfg) -> int:
    record = harness.train_run(cfg)
    final = record["final_losses"]
    print(f"adapted run finished: {record['steps']} steps over "
          f"{record['epochs_run']} epochs ({record['stop_reason']})")
    if final:
        print(f"final losses: critic={final['loss_d']:.4f} "
              f"classifier={final['loss_c']:.4f} generator={final['loss_g']:.4f}")
    print(f"artifacts under {cfg.run_dir('adapted')}")
    return EXIT_OK


def _cmd_baselines(cfg) -> int:
    results = harness.baselines_run(cfg)
    for name, record in results.items():
        print(f"{name}: {record['steps']} steps, final loss "
              f"{record['final_loss']:.4f} -> {cfg.run_dir(name)}")
    return EXIT_OK


def _cmd_evaluate(cfg, args) -> int:
    rep = harness.evaluate_run(cfg, args.checkpoint, args.run)
    where = Path(args.checkpoint).parent if args.checkpoint else cfg.run_dir(args.run)
    print((where / "report.txt").read_text(), end="")
    print(f"weighted F1: {rep['weighted_f1']:.4f}")
    comparison = cfg.output_dir / "comparison.csv"
    if comparison.exists():
        print(f"comparison table: {comparison}")
    return EXIT_OK


def _cmd_synth(cfg, args) -> int:
    path = harness.synth_run(cfg, args.out)
    print(f"wrote synthetic corpus to {path}")
    return EXIT_OK


def _cmd_report(cfg) -> int:
    shown = False
    for name in harness.RUN_NAMES:
        path = cfg.run_dir(name) / "report.txt"
        if path.exists():
            print(f"== {name} ==")
            print(path.read_text())
            shown = True
    comparison = harness.refresh_comparison(cfg)
    if comparison is not None:
        print((cfg.output_dir / "comparison.csv").read_text(), end="")
        if comparison.sandwich is not None:
            verdict = "holds" if comparison.sandwich else "VIOLATED"
            print(f"sandwich (no_transfer <= adapted <= supervised): {verdict}")
    elif not shown:
        print("no reports found; run `subadapt evaluate` first")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = harness.load_config(args.config, args.set)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "prepare":
            return _cmd_prepare(cfg)
        if args.command == "train":
            return _cmd_train(cfg)
        if args.command == "baselines":
            return _cmd_baselines(cfg)
        if args.command == "evaluate":
            return _cmd_evaluate(cfg, args)
        if args.command == "synth":
            return _cmd_synth(cfg, args)
        if args.command == "report":
            return _cmd_report(cfg)
        raise AssertionError(f"unhandled command {args.command}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestionError, PipelineError, SamplerError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergedError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        if e.checkpoint is not None:
            rescue = cfg.run_dir("adapted") / "diverged_parameters.json"
            rescue.parent.mkdir(parents=True, exist_ok=True)
            rescue.write_text(json.dumps(
                {name: arr.tolist() for name, arr in e.checkpoint.items()}) + "\n")
            print(f"last healthy parameters saved to {rescue}", file=sys.stderr)
        return EXIT_DIVERGED


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
