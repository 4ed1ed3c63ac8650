#!/usr/bin/env python3
"""
Search space tests: sampling, mutation, enumeration, benchmark tables and the synthetic oracle.
"""

import json
import sys
import tempfile
from collections import Counter
from pathlib import Path

import numpy as np
from scipy.stats import chisquare

sys.path.insert(0, str(Path(__file__).resolve().parent))

from src.cellgraph import INPUT, OUTPUT, CellGraph, canonical_hash, from_json, normalize, permute, to_json
from src.difficulty import ged_bruteforce
from src.errors import DuplicateRecordError, MissingArchitectureError, TableParseError
from src.evalkit import kendall_tau
from src.spaces import (
    DARTS, NB101, NB201, SpaceSampler, TableSpace, build_table, default_oracle, enumerate_space,
    get_space, load_graphs, load_table, lookup_performance, make_table, mutate, sample_distinct,
    sample_uniform, synthetic_performance, write_table,
)


def test_sampling():
    """Uniform samples are valid, seeded and shaped like their space."""
    print("🧪 Testing uniform sampling...")

    for space in (NB101, NB201, DARTS):
        rng = np.random.default_rng(11)
        cells = [sample_uniform(space, rng) for _ in range(50)]
        assert all(space.is_valid(g) for g in cells), space.name
        again = [sample_uniform(space, np.random.default_rng(11)) for _ in range(1)]
        assert canonical_hash(again[0]) == canonical_hash(cells[0])
        print(f"  ✅ {space.name}: 50 valid samples")

    darts = sample_uniform(DARTS, np.random.default_rng(0))
    assert len(darts.edges) == 11
    assert all(darts.in_degree(j) == min(2, j) for j in range(1, 5))

    distinct = sample_distinct(NB101, 40, np.random.default_rng(5))
    assert len({canonical_hash(g) for g in distinct}) == 40

    print("✅ Sampling is valid and reproducible")
    return True


def test_mutation():
    """Mutants stay valid and sit exactly one edit away."""
    print("🧪 Testing mutation...")

    small = get_space("nb101", max_nodes=5, max_edges=9)
    rng = np.random.default_rng(2)
    for _ in range(200):
        g = sample_uniform(small, rng)
        if g.node_count < 3:
            continue  # input wired straight to output has no single-edit neighbor
        child = mutate(small, g, rng)
        assert small.is_valid(child)
        assert ged_bruteforce(g, child) == 1

    rng = np.random.default_rng(4)
    for _ in range(1000):
        g = sample_uniform(NB101, rng)
        if g.node_count < 3:
            continue
        child = mutate(NB101, g, rng)
        assert NB101.is_valid(child)

    print("✅ Mutation never returns an invalid cell")
    return True


def test_enumeration():
    """Enumeration yields each architecture once."""
    print("🧪 Testing enumeration...")

    tiny = get_space("nb201", vocabulary=("zero", "skip_connect"))
    cells = list(enumerate_space(tiny))
    assert len(cells) == 2 ** 6
    assert len({canonical_hash(g) for g in cells}) == len(cells)

    oon = get_space("nb101", max_nodes=4, max_edges=6, vocabulary=("conv3x3-bn-relu",))
    digests = [canonical_hash(g) for g in enumerate_space(oon)]
    assert len(digests) == len(set(digests))
    assert len(digests) >= 5

    full = sum(1 for _ in enumerate_space(NB201))
    assert full == 5 ** 6 == 15625

    print(f"✅ {len(cells)} NB201-shaped, {full} NB201 and {len(digests)} small OON cells, no duplicates")
    return True


def test_uniform_marginals():
    """Every NB201 edge draws its operation uniformly."""
    print("🧪 Testing NB201 operation marginals...")

    rng = np.random.default_rng(31)
    counts = [Counter() for _ in range(6)]
    for _ in range(5000):
        g = sample_uniform(NB201, rng)
        for position, (_, op) in enumerate(g.edge_ops):
            counts[position][op] += 1

    worst = 1.0
    for per_edge in counts:
        assert set(per_edge) == set(NB201.vocabulary)
        _, p_value = chisquare([per_edge[op] for op in NB201.vocabulary])
        worst = min(worst, p_value)
    print(f"  📊 Smallest chi-square p over 6 edges: {worst:.4f}")
    assert worst > 0.001

    print("✅ Edge operations are uniform")
    return True


def test_tables():
    """JSON Lines tables load eagerly, look up by isomorphism and reject bad records."""
    print("🧪 Testing benchmark tables...")

    rng = np.random.default_rng(9)
    oracle = default_oracle(NB101, seed=3)
    table = build_table(NB101, oracle, 60, rng)
    assert len(table) == 60

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "table.jsonl"
        write_table(table, path)
        loaded = load_table(path, NB101)
        assert len(loaded) == 60
        assert sorted(loaded.records) == sorted(table.records)

        g = next(iter(loaded.records.values())).graph
        interior = list(range(1, g.node_count - 1))[::-1]
        moved = permute(g, [0] + interior + [g.node_count - 1])
        assert lookup_performance(loaded, moved) == lookup_performance(loaded, g)

        unlabeled = load_graphs(path, NB101)
        assert len(unlabeled) == 60

        lines = path.read_text(encoding="utf-8").splitlines()
        bad = Path(tmp) / "bad.jsonl"
        bad.write_text(lines[0] + "\n{not json\n", encoding="utf-8")
        try:
            load_table(bad, NB101)
            raise AssertionError("malformed line accepted")
        except TableParseError as e:
            assert e.line == 2

        record = json.loads(lines[0])
        original = from_json(record["graph"])
        record["graph"] = to_json(normalize(permute(original, reversed_interior(original))))
        duplicate = Path(tmp) / "dup.jsonl"
        duplicate.write_text(lines[0] + "\n" + json.dumps(record) + "\n", encoding="utf-8")
        try:
            load_table(duplicate, NB101)
            raise AssertionError("isomorphic duplicate accepted")
        except DuplicateRecordError as e:
            assert (e.first_line, e.line) == (1, 2)

        out_of_range = Path(tmp) / "range.jsonl"
        record = json.loads(lines[0])
        record["accuracy"] = 93.5
        out_of_range.write_text(json.dumps(record) + "\n", encoding="utf-8")
        try:
            load_table(out_of_range, NB101)
            raise AssertionError("accuracy outside [0, 1] accepted")
        except TableParseError:
            pass

    missing = CellGraph.oon([INPUT, OUTPUT], [(0, 1)])
    if missing not in table:
        try:
            lookup_performance(table, missing)
            raise AssertionError("missing architecture returned a value")
        except MissingArchitectureError as e:
            assert e.digest == canonical_hash(missing)

    print("✅ Tables round-trip and fail loudly on bad records")
    return True


def reversed_interior(g):
    return [0] + list(range(1, g.node_count - 1))[::-1] + [g.node_count - 1]


def test_oracle():
    """Scores are deterministic per seed, inside (0, 1) and rank-stable."""
    print("🧪 Testing the synthetic oracle...")

    rng = np.random.default_rng(1)
    cells = sample_distinct(NB101, 200, rng)
    oracle = default_oracle(NB101, seed=5)
    first = [synthetic_performance(oracle, g) for g in cells]
    second = [synthetic_performance(default_oracle(NB101, seed=5), g) for g in cells]
    assert first == second
    assert all(0.0 < s < 1.0 for s in first)
    assert abs(kendall_tau(first, second) - 1.0) < 1e-12
    assert len(set(first)) > 150

    other = [synthetic_performance(default_oracle(NB101, seed=6), g) for g in cells]
    assert first != other

    print("✅ Oracle is deterministic and spreads scores")
    return True


def test_architecture_sources():
    """TableSpace stays inside its table; SpaceSampler follows the space."""
    print("🧪 Testing architecture sources...")

    tiny = get_space("nb201", vocabulary=("zero", "skip_connect", "nor_conv_3x3"))
    oracle = default_oracle(tiny, seed=0)
    table = build_table(tiny, oracle, None, np.random.default_rng(0))
    assert len(table) == 3 ** 6

    source = TableSpace(table)
    assert source.size == len(table)
    rng = np.random.default_rng(8)
    for _ in range(50):
        g = source.sample(rng)
        assert source.contains(g)
        assert source.contains(source.mutate(g, rng))
    assert len(source.members()) == len(table)

    partial = make_table(tiny, [(g, 0.5) for g in list(table.graphs())[:20]])
    assert len(TableSpace(partial).members()) == 20

    sampler = SpaceSampler(NB101)
    assert sampler.size is None
    g = next(c for c in (sampler.sample(rng) for _ in range(100)) if c.node_count >= 3)
    assert sampler.contains(sampler.mutate(g, rng))

    print("✅ Sources sample and mutate inside their domain")
    return True


def main():
    """Run all tests."""
    print("🔧 DCLP Performance Predictor - Search Space Tests")
    print("=" * 60)

    tests = [
        ("Sampling", test_sampling),
        ("Mutation", test_mutation),
        ("Enumeration", test_enumeration),
        ("Uniform Marginals", test_uniform_marginals),
        ("Benchmark Tables", test_tables),
        ("Synthetic Oracle", test_oracle),
        ("Architecture Sources", test_architecture_sources),
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
