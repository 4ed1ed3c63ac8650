#!/usr/bin/env python3
"""
Predictor tests: ranking and regression losses, fine-tuning with early stopping,
and predictor files.
"""

import math
import sys
import tempfile
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent))

from src.errors import ArtifactError
from src.neuralcore import EncoderConfig, build_encoder
from src.predictor import (
    FinetuneConfig, LabeledSample, LossKind, finetune, listmle_loss, load_predictor, mse_loss,
    predict, ranking_order, save_predictor, zscore_normalize,
)
from src.spaces import NB101, NB201, default_oracle, sample_distinct, synthetic_performance


SMALL = EncoderConfig(vocabulary=NB101.encoder_vocabulary, hidden=8, layers=2)


def labeled(count: int, seed: int):
    oracle = default_oracle(NB101, seed=seed)
    graphs = sample_distinct(NB101, count, np.random.default_rng(seed))
    return [LabeledSample(g, synthetic_performance(oracle, g)) for g in graphs]


def test_losses():
    """ListMLE, MSE and z-score values on hand-checked inputs."""
    print("🧪 Testing fine-tuning losses...")

    scores = torch.tensor([2.0, 1.0, 0.0], dtype=torch.float64)
    assert abs(listmle_loss(scores, [0, 1, 2]).item() - 0.72087) < 1e-4
    assert listmle_loss(scores, [2, 1, 0]).item() > listmle_loss(scores, [0, 1, 2]).item()
    tied = torch.tensor([0.7, 0.7], dtype=torch.float64)
    assert abs(listmle_loss(tied, [1, 0]).item() - math.log(2)) < 1e-12
    try:
        listmle_loss(scores, [0, 0, 2])
        raise AssertionError("non-permutation order accepted")
    except ValueError:
        pass

    assert abs(mse_loss(scores, torch.zeros(3, dtype=torch.float64)).item() - 5 / 3) < 1e-12

    normalized, mean, std = zscore_normalize([1.0, 2.0, 3.0])
    assert np.allclose(normalized, [-1.22474, 0.0, 1.22474], atol=1e-5)
    assert mean == 2.0 and abs(std - math.sqrt(2 / 3)) < 1e-12
    for bad in ([0.5], [0.3, 0.3, 0.3]):
        try:
            zscore_normalize(bad)
            raise AssertionError(f"zscore accepted {bad}")
        except ValueError:
            pass

    assert FinetuneConfig.batch_size(100) == 20
    assert FinetuneConfig.batch_size(10) == 4
    assert FinetuneConfig.batch_size(1000) == 200

    samples = labeled(4, 1)
    tied_samples = [LabeledSample(samples[0].graph, 0.9), LabeledSample(samples[1].graph, 0.9),
                    LabeledSample(samples[2].graph, 0.95)]
    order = ranking_order(tied_samples)
    assert order[0] == 2 and sorted(order[1:]) == [0, 1]
    assert ranking_order(list(reversed(tied_samples)))[1:] == [2 - k for k in order[1:]]

    print("✅ Loss values match the hand computations")
    return True


def test_finetune():
    """Best-loss restore, untouched caller encoder and frozen-encoder mode."""
    print("🧪 Testing fine-tuning...")

    samples = labeled(24, 2)
    encoder = build_encoder(SMALL, np.random.default_rng(0))
    reference = {k: v.clone() for k, v in encoder.state_dict().items()}

    for kind in LossKind:
        cfg = FinetuneConfig(loss=kind, lr=0.01, max_epochs=15, patience=5, head_hidden=8)
        result = finetune(encoder, samples, cfg, np.random.default_rng(1))
        assert result.batch_size == 5
        assert result.best_loss <= result.initial_loss
        assert result.trace[0][0] == 0 and len(result.trace) <= 16
        assert result.best_loss <= min(loss for _, loss in result.trace) + cfg.min_delta
        assert result.trace[result.best_epoch][1] == result.best_loss
        print(f"  📊 {kind.value}: initial {result.initial_loss:.4f} -> best {result.best_loss:.4f}"
              f" at epoch {result.best_epoch}")
    assert all(torch.equal(v, reference[k]) for k, v in encoder.state_dict().items())

    frozen = finetune(encoder, samples, FinetuneConfig(max_epochs=3, head_hidden=8, freeze_encoder=True),
                      np.random.default_rng(1))
    assert all(torch.equal(v, reference[k]) for k, v in frozen.predictor.encoder.state_dict().items())

    stalled = finetune(None, samples, FinetuneConfig(max_epochs=50, patience=3, min_delta=1e9, head_hidden=8),
                       np.random.default_rng(2), encoder_config=SMALL)
    assert stalled.stopped_early and len(stalled.trace) == 4 and stalled.best_epoch == 0

    held = finetune(encoder, samples, FinetuneConfig(loss="mse", max_epochs=4, holdout_fraction=0.25, head_hidden=8),
                    np.random.default_rng(3))
    assert len(held.trace) == 5

    try:
        finetune(encoder, samples[:3], FinetuneConfig(head_hidden=8), np.random.default_rng(0))
        raise AssertionError("ListMLE on fewer cells than one batch accepted")
    except ValueError:
        pass
    try:
        finetune(None, samples, FinetuneConfig(), np.random.default_rng(0))
        raise AssertionError("scratch training without an encoder config accepted")
    except ValueError:
        pass

    print("✅ Fine-tuning keeps the best epoch and leaves its input alone")
    return True


def test_predict_and_files():
    """Prediction is batched consistently and predictors survive a save/load."""
    print("🧪 Testing prediction and predictor files...")

    samples = labeled(12, 3)
    result = finetune(build_encoder(SMALL, np.random.default_rng(4)), samples,
                      FinetuneConfig(loss="mse_norm", max_epochs=3, head_hidden=8), np.random.default_rng(4))
    graphs = [s.graph for s in samples]
    scores = predict(result.predictor, graphs)
    assert scores.shape == (12,)
    assert np.allclose(predict(result.predictor, graphs, workers=3), scores, atol=1e-12)
    assert np.allclose(predict(result.predictor, graphs[:5]), scores[:5], atol=1e-12)
    assert predict(result.predictor, []).shape == (0,)

    accuracies = [s.accuracy for s in samples]
    denormalized = result.predictor.denormalize(scores)
    assert np.allclose(denormalized, np.mean(accuracies) + np.std(accuracies) * scores)

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "predictor.pt"
        save_predictor(path, result.predictor)
        restored = load_predictor(path, SMALL)
        assert restored.loss is LossKind.MSE_NORM
        assert abs(restored.mean - result.predictor.mean) < 1e-15
        assert np.array_equal(predict(restored, graphs), scores)

        other = EncoderConfig(vocabulary=NB201.encoder_vocabulary, hidden=8, layers=2)
        try:
            load_predictor(path, other)
            raise AssertionError("vocabulary mismatch accepted")
        except ArtifactError:
            pass

    print("✅ Predictions are stable and files round-trip")
    return True


def main():
    """Run all tests."""
    print("🔧 DCLP Performance Predictor - Predictor Tests")
    print("=" * 60)

    tests = [
        ("Losses", test_losses),
        ("Fine-tuning", test_finetune),
        ("Prediction and Files", test_predict_and_files),
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
