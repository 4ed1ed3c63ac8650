#!/usr/bin/env python3
"""
DCLP Performance Predictor

Pre-trains a graph encoder on unlabeled cell architectures with a curriculum-guided
contrastive objective, fine-tunes it into a ranking predictor on a few labeled cells,
and uses the predictor to rank or search a NAS space.

Usage:
    python main.py pretrain --config configs/desk.toml
    python main.py finetune --config configs/desk.toml
    python main.py eval --config configs/desk.toml
    python main.py search --config configs/desk.toml --set search.strategy=evolution
    python main.py oracle-export --config configs/desk.toml

Settings come from the config file, then DCLP_* environment variables (a .env file
is loaded first), then --set flags.
"""

import argparse
import json
import os
import sys
import time
from typing import List, Optional

from dotenv import load_dotenv

from src import runner
from src.config import RunConfig, load_config
from src.errors import DCLPError, RuntimeFailure
from src.utils import format_duration, print_header, print_section


STAGES = ("pretrain", "finetune", "eval", "search", "oracle-export")


def load_environment(verbose: bool = True) -> None:
    """Load environment variables from .env file."""
    env_file = '.env'
    if os.path.exists(env_file):
        load_dotenv(env_file)
        if verbose:
            print(f"✅ Loaded configuration from {env_file}")
    elif verbose:
        print("⚠️  No .env file found. Using the config file and environment variables only.")


def print_configuration(config: RunConfig) -> None:
    """Print the settings that decide what a run does."""
    print_section("Configuration")

    config_items = [
        ("Config File", config.source or "Not set"),
        ("Output Directory", config.output_dir),
        ("Seed", config.seed),
        ("Search Space", config.space.name),
        ("Ground Truth", config.space.table if config.space.ground_truth == "table" else "synthetic oracle"),
        ("Encoder", f"{config.pretrain.layers} GIN layers x {config.pretrain.hidden}"),
        ("Selection Mode", config.curriculum.selection_mode),
        ("Fine-tune Loss", config.finetune.loss),
        ("Search Strategy", config.search.strategy),
        ("Workers", config.workers),
    ]

    for label, value in config_items:
        print(f"  {label:.<30} {value}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="main.py",
        description="Curriculum-guided contrastive pre-training for NAS performance predictors.",
    )
    sub = parser.add_subparsers(dest="stage", required=True, metavar="{" + ",".join(STAGES) + "}")
    helps = {
        "pretrain": "contrastive pre-training of the graph encoder",
        "finetune": "fine-tune a ranking predictor on labeled cells",
        "eval": "Kendall's tau of the predictor on the evaluation population",
        "search": "predictor-guided architecture search",
        "oracle-export": "write a synthetic benchmark table",
    }
    for stage in STAGES:
        cmd = sub.add_parser(stage, help=helps[stage])
        cmd.add_argument("--config", help="TOML or JSON run configuration")
        cmd.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                         help="override one configuration field (repeatable)")
        cmd.add_argument("--workers", type=int, help="threads for candidate generation and scoring")
        cmd.add_argument("--quiet", action="store_true", help="print only the final result")
    return parser


def _report_pretrain(result) -> None:
    print_section("Summary")
    print(f"📉 Final pre-training loss: {result.epoch_losses[-1]:.6f} after {result.total_steps} steps")


def _report_finetune(result) -> None:
    print_section("Summary")
    note = " (stopped early)" if result.stopped_early else ""
    print(f"📉 Best fine-tuning loss: {result.best_loss:.6f} at epoch {result.best_epoch}{note}")


def _report_eval(report) -> None:
    print_section("Summary")
    print(f"📈 Kendall's tau: {report.tau:.4f} over {report.n} cells")


def _report_search(outcome) -> None:
    result, report = outcome
    print_section("Summary")
    if result.best_graph is None:
        print("📭 The search found no architecture.")
        return
    print(f"🏆 Best architecture ({result.best_hash[:12]}), accuracy {result.best_accuracy:.4f}, "
          f"{result.queries} ground-truth queries")
    print(json.dumps(report["best"]["graph"], sort_keys=True))
    if report.get("percentile") is not None:
        print(f"📊 Percentile rank: {report['percentile']:.4f}%")


def _report_oracle(outcome) -> None:
    path, table = outcome
    print_section("Summary")
    print(f"🧮 Wrote {len(table.records)} scored cells to {path}")


def run_stage(stage: str, config: RunConfig, verbose: bool):
    stages = {
        "pretrain": (runner.run_pretrain, _report_pretrain),
        "finetune": (runner.run_finetune, _report_finetune),
        "eval": (runner.run_eval, _report_eval),
        "search": (runner.run_search, _report_search),
        "oracle-export": (runner.run_oracle_export, _report_oracle),
    }
    run, report = stages[stage]
    outcome = run(config, verbose=verbose)
    report(outcome)
    return outcome


def main(argv: Optional[List[str]] = None) -> int:
    """Main application entry point."""
    args = build_parser().parse_args(argv)
    verbose = not args.quiet
    start_time = time.time()

    if verbose:
        print_header("DCLP Performance Predictor")
        print(f"🚀 Starting stage '{args.stage}'...")

    try:
        load_environment(verbose)
        overrides = list(args.overrides)
        if args.workers is not None:
            overrides.append(f"workers={args.workers}")
        config = load_config(args.config, overrides)
        if verbose:
            print_configuration(config)
            print_section(f"Running {args.stage}")

        run_stage(args.stage, config, verbose)

        if verbose:
            print(f"\n🎉 Stage '{args.stage}' completed in {format_duration(time.time() - start_time)}")
        return 0

    except KeyboardInterrupt:
        print("\n\n⚠️  Run interrupted by user (Ctrl+C)")
        return 1

    except DCLPError as e:
        print(f"\n❌ {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code

    except (ValueError, OSError) as e:
        print(f"\n❌ {RuntimeFailure.__name__}: {e}", file=sys.stderr)
        return RuntimeFailure.exit_code


if __name__ == "__main__":
    exit_code = main()
    sys.exit(exit_code)
