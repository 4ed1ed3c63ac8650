#!/usr/bin/env python3
"""
Pre-training tests: RBF similarity, InfoNCE, the memory bank and short curriculum runs.
"""

import csv
import math
import sys
import tempfile
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent))

from src.augment import AugmentationSpec, augmentable
from src.curriculum import CurriculumConfig, temperature
from src.neuralcore import EncoderConfig, build_encoder
from src.pretrain import (
    ContrastiveConfig, MemoryBank, batch_contrastive_loss, info_nce, info_nce_from_similarities,
    pair_similarity, pretrain, rbf_matrix, rbf_similarity, write_loss_csv,
)
from src.spaces import NB101, sample_distinct


SMALL = EncoderConfig(vocabulary=NB101.encoder_vocabulary, hidden=8, layers=2)


def tiny_run(seed: int, workers: int = 1, checkpoints=None, **overrides):
    graphs = sample_distinct(NB101, 14, np.random.default_rng(100))
    encoder = build_encoder(SMALL, np.random.default_rng(seed))
    contrastive = ContrastiveConfig(**{"batch_size": 4, "bank_capacity": 8, "epochs": 3,
                                       "candidates": 4, "checkpoint_every": 2, **overrides})
    hook = None if checkpoints is None else (lambda epoch, enc: checkpoints.append(epoch))
    return pretrain(graphs, encoder, CurriculumConfig(), contrastive, AugmentationSpec(),
                    np.random.default_rng(seed), workers=workers, on_checkpoint=hook)


def test_similarity_and_info_nce():
    """Kernel values and InfoNCE on hand-checked inputs."""
    print("🧪 Testing RBF similarity and InfoNCE...")

    z1 = torch.zeros(4, dtype=torch.float64)
    z2 = torch.tensor([1.0, 1.0, 0.0, 0.0], dtype=torch.float64)
    # ||z1 - z2||^2 = 2 = 2 sigma^2
    assert abs(rbf_similarity(z1, z2, 1.0).item() - math.exp(-1)) < 1e-15
    assert rbf_similarity(z2, z2).item() == 1.0
    pair = rbf_matrix(torch.stack([z1, z2]), torch.stack([z1, z2]))
    assert torch.allclose(pair, pair.T) and torch.allclose(torch.diagonal(pair), torch.ones(2, dtype=torch.float64))

    loss = info_nce_from_similarities(torch.tensor(0.9, dtype=torch.float64),
                                      torch.tensor([0.2, 0.3, 0.1], dtype=torch.float64), 0.2)
    assert abs(loss.item() - 0.09376) < 1e-4

    for n in (1, 5, 32):
        flat = info_nce_from_similarities(torch.tensor(0.4, dtype=torch.float64),
                                          torch.full((n,), 0.4, dtype=torch.float64), 0.2)
        assert abs(flat.item() - math.log(n + 1)) < 1e-12

    q = torch.zeros(3, dtype=torch.float64)
    near = torch.tensor([0.1, 0.0, 0.0], dtype=torch.float64)
    far = torch.tensor([[3.0, 0.0, 0.0], [0.0, 3.0, 0.0]], dtype=torch.float64)
    assert info_nce(q, near, far) < info_nce(q, far[0], torch.stack([near, far[1]]))

    try:
        info_nce_from_similarities(torch.tensor(0.5, dtype=torch.float64), torch.zeros(0, dtype=torch.float64), 0.2)
        raise AssertionError("InfoNCE without negatives accepted")
    except ValueError:
        pass
    try:
        rbf_similarity(torch.zeros(3), torch.zeros(4))
        raise AssertionError("length mismatch accepted")
    except ValueError:
        pass

    print("✅ Similarity and InfoNCE values are correct")
    return True


def test_memory_bank():
    """FIFO eviction, oldest-first order and detached storage."""
    print("🧪 Testing the memory bank...")

    bank = MemoryBank(3)
    assert bank.tensor() is None and len(bank) == 0
    bank.push(torch.tensor([[0.0], [1.0]], dtype=torch.float64))
    assert bank.tensor().flatten().tolist() == [0.0, 1.0]
    source = torch.tensor([[2.0], [3.0]], dtype=torch.float64, requires_grad=True)
    bank.push(source * 1.0)
    stored = bank.tensor()
    assert stored.flatten().tolist() == [1.0, 2.0, 3.0]
    assert len(bank) == 3 and not stored.requires_grad

    try:
        MemoryBank(0)
        raise AssertionError("zero-capacity bank accepted")
    except ValueError:
        pass

    keyed = MemoryBank(3)
    assert keyed.keys() is None
    keyed.push(torch.zeros(2, 1, dtype=torch.float64), [4, 7])
    keyed.push(torch.ones(2, 1, dtype=torch.float64), [9, 4])
    assert keyed.keys().tolist() == [7, 9, 4]
    assert bank.keys().tolist() == [-1, -1, -1]

    print("✅ Memory bank evicts oldest entries first")
    return True


def test_bank_excludes_own_cell():
    """A stale bank copy of a query's own cell is not one of its negatives."""
    print("🧪 Testing own-cell masking in the memory bank...")

    z_origin = torch.tensor([[0.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
    z_positive = torch.tensor([[0.1, 0.0], [1.0, 0.2]], dtype=torch.float64)
    # rows 0 and 2 are stale copies of the two origins, row 1 belongs to another cell
    bank = torch.tensor([[0.0, 0.0], [3.0, 3.0], [1.0, 0.0]], dtype=torch.float64)
    keys = torch.tensor([0, 1])
    bank_keys = torch.tensor([0, 5, 1])

    masked = batch_contrastive_loss(z_origin, z_positive, bank, 0.2, 1.0, keys=keys, bank_keys=bank_keys)
    unmasked = batch_contrastive_loss(z_origin, z_positive, bank, 0.2, 1.0)

    rows = []
    for i, others in ((0, [z_positive[1], bank[1], bank[2]]), (1, [z_positive[0], bank[0], bank[1]])):
        rows.append(info_nce(z_origin[i], z_positive[i], torch.stack(others), 0.2, 1.0))
    expected = torch.stack(rows).mean()
    print(f"  📊 Loss with own copies masked {masked.item():.6f}, unmasked {unmasked.item():.6f}")
    assert abs(masked.item() - expected.item()) < 1e-12
    assert masked.item() < unmasked.item()

    lonely = MemoryBank(4)
    lonely.push(z_origin[:1], [0])
    try:
        batch_contrastive_loss(z_origin[:1], z_positive[:1], lonely.tensor(), 0.2, 1.0,
                               keys=torch.tensor([0]), bank_keys=lonely.keys())
        raise AssertionError("a row without negatives was accepted")
    except ValueError:
        pass

    for size in (0, 1):
        try:
            ContrastiveConfig(batch_size=size)
            raise AssertionError(f"batch_size={size} accepted")
        except ValueError:
            pass
    ContrastiveConfig(batch_size=2)

    print("✅ Own-cell bank entries are masked out of the negatives")
    return True


def test_long_nb101_run():
    """Several epochs over 200 NB101 cells with the default mixed augmentation."""
    print("🧪 Testing a longer NB101 pre-training run...")

    graphs = sample_distinct(NB101, 200, np.random.default_rng(2024))
    for seed in (0, 1, 2):
        encoder = build_encoder(SMALL, np.random.default_rng(seed))
        result = pretrain(graphs, encoder, CurriculumConfig(), ContrastiveConfig.desk(epochs=5),
                          AugmentationSpec(), np.random.default_rng(seed))
        assert len(result.epoch_losses) == 5
        assert all(math.isfinite(loss) for loss in result.epoch_losses)
        assert len(result.selections) == 5 * (200 - result.dropped)
        print(f"  📊 Seed {seed}: {result.dropped} cells filtered, final loss {result.epoch_losses[-1]:.4f}")

    print("✅ Five epochs complete on every seed")
    return True


def test_pretrain_run():
    """Step counts, curriculum temperatures, checkpoints and CSV output of a short run."""
    print("🧪 Testing a short pre-training run...")

    checkpoints = []
    result = tiny_run(seed=3, checkpoints=checkpoints)
    pool = 14 - result.dropped
    steps_per_epoch = math.ceil(pool / 4)
    assert result.total_steps == 3 * steps_per_epoch
    assert len(result.step_losses) == result.total_steps
    assert len(result.epoch_losses) == 3
    assert len(result.selections) == 3 * pool
    assert checkpoints == [2, 3]
    assert all(math.isfinite(s.loss) and s.loss > 0 for s in result.step_losses)

    schedule = CurriculumConfig().with_steps(result.total_steps)
    for record in result.selections:
        assert abs(record.tau - temperature(schedule, record.step)) < 1e-15
        assert 0 <= record.chosen < 4
        if record.tau > 1e-6:
            assert record.chosen_difficulty == record.max_difficulty
        elif record.tau < -1e-6:
            assert record.chosen_difficulty == record.min_difficulty

    print(f"  📊 {result.total_steps} steps, final epoch loss {result.epoch_losses[-1]:.4f}")

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "pretrain_loss.csv"
        write_loss_csv(path, result.step_losses)
        with open(path, newline="", encoding="utf-8") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["step", "epoch", "loss"]
        assert len(rows) == result.total_steps + 1
        assert float(rows[1][2]) == result.step_losses[0].loss

    print("✅ Pre-training follows the schedule and records its trace")
    return True


def test_determinism_and_modes():
    """Same seed gives the same losses with any worker count; embedding difficulty runs."""
    print("🧪 Testing pre-training determinism...")

    first = tiny_run(seed=11)
    second = tiny_run(seed=11, workers=3)
    assert [s.loss for s in first.step_losses] == [s.loss for s in second.step_losses]
    assert [r.chosen for r in first.selections] == [r.chosen for r in second.selections]
    graphs = [g for g in sample_distinct(NB101, 10, np.random.default_rng(7)) if augmentable(g, AugmentationSpec())]
    with torch.no_grad():
        assert torch.equal(first.encoder.embed(graphs), second.encoder.embed(graphs))

    other = tiny_run(seed=12)
    assert [s.loss for s in other.step_losses] != [s.loss for s in first.step_losses]

    embedded = tiny_run(seed=11, epochs=1, difficulty_measure="embedding")
    assert all(0.0 <= r.chosen_difficulty <= 1.0 for r in embedded.selections)

    positive, negative = pair_similarity(first.encoder, graphs, AugmentationSpec(), np.random.default_rng(0))
    assert 0.0 < positive <= 1.0 and 0.0 <= negative <= 1.0

    try:
        ContrastiveConfig(temperature=0.0)
        raise AssertionError("zero InfoNCE temperature accepted")
    except ValueError:
        pass

    print("✅ Pre-training is reproducible per seed")
    return True


def main():
    """Run all tests."""
    print("🔧 DCLP Performance Predictor - Pre-training Tests")
    print("=" * 60)

    tests = [
        ("Similarity and InfoNCE", test_similarity_and_info_nce),
        ("Memory Bank", test_memory_bank),
        ("Own-cell Masking", test_bank_excludes_own_cell),
        ("Pre-training Run", test_pretrain_run),
        ("Determinism", test_determinism_and_modes),
        ("Long NB101 Run", test_long_nb101_run),
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
