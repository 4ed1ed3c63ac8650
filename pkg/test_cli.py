#!/usr/bin/env python3
"""
End-to-end tests of the command-line pipeline on a tiny configuration.
"""

import json
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import main as cli


TINY_TOML = """
seed = 0
output_dir = "run"
workers = 1

[space]
name = "nb101"
max_nodes = 5
table_size = 60

[pretrain]
epochs = 2
batch_size = 16
bank_capacity = 32
candidates = 4
hidden = 8
layers = 2
unlabeled_count = 40
checkpoint_every = 1

[finetune]
label_count = 20
max_epochs = 5
head_hidden = 8

[eval]
sample_count = 50

[search]
iterations = 3
samples_per_iteration = 10
top_k = 2
"""


def write_tiny(directory: Path, text: str = TINY_TOML) -> str:
    path = directory / "tiny.toml"
    path.write_text(text, encoding="utf-8")
    return str(path)


def run(*argv: str) -> int:
    return cli.main([*argv, "--quiet"])


def test_full_pipeline():
    """pretrain -> finetune -> eval -> search writes every artifact."""
    print("🧪 Testing the full pipeline...")

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        config = write_tiny(tmp)
        out = tmp / "run"

        assert run("pretrain", "--config", config) == 0
        for name in ("encoder.pt", "encoder_epoch001.pt", "encoder_epoch002.pt", "pretrain_loss.csv",
                     "config_echo.json"):
            assert (out / name).exists(), name
        assert json.loads((out / "config_echo.json").read_text(encoding="utf-8"))["stage"] == "pretrain"

        assert run("finetune", "--config", config) == 0
        assert (out / "predictor.pt").exists()
        trace = (out / "finetune_trace.csv").read_text(encoding="utf-8").splitlines()
        assert trace[0] == "epoch,loss" and len(trace) >= 2

        assert run("eval", "--config", config) == 0
        report = json.loads((out / "eval_report.json").read_text(encoding="utf-8"))
        assert -1.0 <= report["tau"] <= 1.0 and report["n"] == 50
        assert len((out / "rank_pairs.csv").read_text(encoding="utf-8").splitlines()) == 51

        for strategy in ("random", "evolution", "rl"):
            assert run("search", "--config", config, "--set", f"search.strategy={strategy}",
                       "--set", "search.population=5", "--set", "search.max_population=10") == 0
            search = json.loads((out / "search_report.json").read_text(encoding="utf-8"))
            assert search["strategy"] == strategy
            assert search["queries"] <= search["query_budget"] == 6
            assert search["percentile"] is None
            assert len((out / "search_log.jsonl").read_text(encoding="utf-8").splitlines()) == 3

        assert run("finetune", "--config", config, "--set", "finetune.pretrained=false") == 0

    print("✅ Every stage ran and wrote its artifacts")
    return True


def test_table_ground_truth():
    """An exported oracle table drives labels, evaluation and search with a percentile."""
    print("🧪 Testing table ground truth...")

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        config = write_tiny(tmp)
        out = tmp / "run"

        assert run("oracle-export", "--config", config) == 0
        table = out / "oracle_table.jsonl"
        assert len(table.read_text(encoding="utf-8").splitlines()) == 60

        flags = ["--set", "space.ground_truth=table", "--set", f"space.table={table}"]
        assert run("pretrain", "--config", config, *flags) == 0
        assert run("finetune", "--config", config, *flags) == 0
        assert run("eval", "--config", config, *flags) == 0
        report = json.loads((out / "eval_report.json").read_text(encoding="utf-8"))
        assert report["n"] == 60
        assert report["query_budget"] == 20

        labeled = [*flags, "--set", f"finetune.labels={table}"]
        assert run("finetune", "--config", config, *labeled) == 0
        assert run("eval", "--config", config, *labeled) == 0
        report = json.loads((out / "eval_report.json").read_text(encoding="utf-8"))
        assert report["query_budget"] == 60
        assert run("search", "--config", config, *flags) == 0
        search = json.loads((out / "search_report.json").read_text(encoding="utf-8"))
        assert 0.0 <= search["percentile"] <= 100.0

    print("✅ Table runs report a percentile rank")
    return True


def test_exit_codes():
    """Config errors exit 2, artifact mismatches 3."""
    print("🧪 Testing exit codes...")

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        config = write_tiny(tmp)
        no_seed = tmp / "no_seed.toml"
        no_seed.write_text(TINY_TOML.replace("seed = 0\n", ""), encoding="utf-8")
        assert run("pretrain", "--config", str(no_seed)) == 2
        assert run("search", "--config", config, "--set", "search.top_k=50") == 2

        assert run("finetune", "--config", config) == 3

        assert run("pretrain", "--config", config) == 0
        assert run("finetune", "--config", config, "--set", "pretrain.hidden=16") == 3

    print("✅ Failures map to their exit codes")
    return True


def test_reproducibility():
    """Same seed, same pre-training loss file, whatever the worker count."""
    print("🧪 Testing run reproducibility...")

    with tempfile.TemporaryDirectory() as first, tempfile.TemporaryDirectory() as second:
        a = Path(first)
        b = Path(second)
        assert run("pretrain", "--config", write_tiny(a)) == 0
        assert run("pretrain", "--config", write_tiny(b), "--workers", "2") == 0
        assert (a / "run" / "pretrain_loss.csv").read_bytes() == (b / "run" / "pretrain_loss.csv").read_bytes()

    print("✅ Loss files are byte-identical")
    return True


def main():
    """Run all tests."""
    print("🔧 DCLP Performance Predictor - Command-line Tests")
    print("=" * 60)

    tests = [
        ("Full Pipeline", test_full_pipeline),
        ("Table Ground Truth", test_table_ground_truth),
        ("Exit Codes", test_exit_codes),
        ("Reproducibility", test_reproducibility),
    ]

    passed_tests = 0
    total_tests = len(tests)

    for test_name, test_func in tests:
        print(f"\n--- {test_name} ---")
        try:
            if test_func():
                passed_tests += 1
        except Exception as e:
            print(f"❌ Test '{test_name}' failed with exception: {type(e).__name__}: {e}")

    print(f"\n{'='*60}")
    print(f"🏁 Test Results: {passed_tests}/{total_tests} tests passed")
    return 0 if passed_tests == total_tests else 1


if __name__ == "__main__":
    sys.exit(main())
