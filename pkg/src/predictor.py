"""
Few-shot fine-tuning of encoder plus MLP head, and prediction with the result.
"""

import copy
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from .cellgraph import CellGraph, canonical_hash
from .errors import ArtifactError
from .neuralcore import (
    DTYPE, EncoderConfig, GINEncoder, MlpHead, adam_step, backward, build_encoder, build_head,
    load_checkpoint, make_adam, restore_module, save_checkpoint,
)
from .utils import ProgressTracker, parallel_map


PREDICT_CHUNK = 512


class LossKind(str, Enum):
    """Fine-tuning objective."""

    MSE = "mse"
    MSE_NORM = "mse_norm"
    LISTMLE = "listmle"


@dataclass(frozen=True)
class LabeledSample:
    graph: CellGraph
    accuracy: float


@dataclass(frozen=True)
class FinetuneConfig:
    """Adam fine-tuning with early stopping on the monitored loss."""

    loss: LossKind = LossKind.LISTMLE
    lr: float = 0.005
    max_epochs: int = 200
    patience: int = 20
    min_delta: float = 1e-5
    freeze_encoder: bool = False
    holdout_fraction: float = 0.0
    head_hidden: int = 128

    def __post_init__(self):
        object.__setattr__(self, "loss", LossKind(self.loss))
        if self.lr <= 0 or self.max_epochs < 1 or self.patience < 1 or self.head_hidden < 1:
            raise ValueError("lr, max_epochs, patience and head_hidden must be positive")
        if self.min_delta < 0:
            raise ValueError("min_delta must be >= 0")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")

    @staticmethod
    def batch_size(labeled: int) -> int:
        """max(4, ceil(n / 5)): 100 labels give batches of 20."""
        return max(4, math.ceil(labeled / 5))


def zscore_normalize(labels: Sequence[float]) -> Tuple[np.ndarray, float, float]:
    """(x - mean) / std with the population standard deviation."""
    values = np.asarray(labels, dtype=np.float64)
    if values.size < 2:
        raise ValueError("z-score normalization needs at least two labels")
    mean = float(values.mean())
    std = float(values.std())
    if std == 0.0:
        raise ValueError("labels have zero variance")
    return (values - mean) / std, mean, std


def ranking_order(samples: Sequence[LabeledSample], hashes: Optional[Sequence[str]] = None) -> List[int]:
    """Indices by descending accuracy, ties broken by canonical hash."""
    if hashes is None:
        hashes = [canonical_hash(s.graph) for s in samples]
    keys = [(-s.accuracy, hashes[k], k) for k, s in enumerate(samples)]
    return [k for _, _, k in sorted(keys)]


def listmle_loss(scores: torch.Tensor, true_order: Sequence[int]) -> torch.Tensor:
    """-sum_i log softmax of s_{o_i} over the suffix o_i..o_n."""
    order = [int(k) for k in true_order]
    if sorted(order) != list(range(scores.shape[0])):
        raise ValueError("true_order must be a permutation of the score indices")
    ordered = scores[torch.tensor(order, dtype=torch.long)]
    suffix = torch.logcumsumexp(ordered.flip(0), dim=0).flip(0)
    return (suffix - ordered).sum()


def mse_loss(scores: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return ((scores - targets) ** 2).mean()


class Predictor(nn.Module):
    """Encoder plus head, with the label statistics of mse_norm training."""

    def __init__(self, encoder: GINEncoder, head: MlpHead, loss: LossKind,
                 mean: float = 0.0, std: float = 1.0):
        super().__init__()
        self.encoder = encoder
        self.head = head
        self.loss = LossKind(loss)
        self.mean = mean
        self.std = std

    def forward(self, graphs: Sequence[CellGraph]) -> torch.Tensor:
        return self.head(self.encoder.embed(graphs))

    def denormalize(self, scores: Sequence[float]) -> np.ndarray:
        """Map head outputs back to the accuracy scale (identity unless mse_norm)."""
        values = np.asarray(scores, dtype=np.float64)
        if self.loss is LossKind.MSE_NORM:
            return self.mean + self.std * values
        return values


def predict(predictor: Predictor, graphs: Sequence[CellGraph], workers: int = 1) -> np.ndarray:
    """Raw head scores, one per cell."""
    if not graphs:
        return np.zeros(0)
    chunks = [list(graphs[k:k + PREDICT_CHUNK]) for k in range(0, len(graphs), PREDICT_CHUNK)]

    def run(chunk):
        with torch.no_grad():
            return predictor(chunk).numpy().copy()

    return np.concatenate(parallel_map(run, chunks, workers))


@dataclass
class FinetuneResult:
    """Best-loss predictor with the per-epoch monitored loss."""

    predictor: Predictor
    trace: List[Tuple[int, float]] = field(default_factory=list)
    best_epoch: int = 0
    best_loss: float = float("inf")
    batch_size: int = 0
    stopped_early: bool = False

    @property
    def initial_loss(self) -> float:
        return self.trace[0][1]


def _objective(predictor: Predictor, samples: Sequence[LabeledSample], hashes: Sequence[str],
               targets: torch.Tensor, indices: Sequence[int], kind: LossKind) -> torch.Tensor:
    subset = [samples[k] for k in indices]
    scores = predictor([s.graph for s in subset])
    if kind is LossKind.LISTMLE:
        return listmle_loss(scores, ranking_order(subset, [hashes[k] for k in indices]))
    return mse_loss(scores, targets[torch.tensor(list(indices), dtype=torch.long)])


def finetune(encoder: Optional[GINEncoder], samples: Sequence[LabeledSample], cfg: FinetuneConfig,
             rng: np.random.Generator, encoder_config: Optional[EncoderConfig] = None,
             verbose: bool = False) -> FinetuneResult:
    """Train encoder and head on labeled cells; encoder=None starts from random weights.

    The caller's encoder is copied, never modified.
    """
    n = len(samples)
    batch = FinetuneConfig.batch_size(n)
    if n < 2:
        raise ValueError("fine-tuning needs at least two labeled cells")
    if cfg.loss is LossKind.LISTMLE and n < batch:
        raise ValueError(f"listmle fine-tuning needs at least {batch} labeled cells")

    if encoder is None:
        if encoder_config is None:
            raise ValueError("encoder_config is required when no pre-trained encoder is given")
        encoder = build_encoder(encoder_config, rng)
    else:
        encoder = copy.deepcopy(encoder)
    head = build_head(encoder.embedding_dim, rng, cfg.head_hidden)

    hashes = [canonical_hash(s.graph) for s in samples]
    accuracies = [s.accuracy for s in samples]
    mean, std = 0.0, 1.0
    if cfg.loss is LossKind.MSE_NORM:
        normalized, mean, std = zscore_normalize(accuracies)
        targets = torch.tensor(normalized, dtype=DTYPE)
    else:
        targets = torch.tensor(accuracies, dtype=DTYPE)
    predictor = Predictor(encoder, head, cfg.loss, mean, std)
    for param in predictor.encoder.parameters():
        param.requires_grad_(not cfg.freeze_encoder)

    indices = list(range(n))
    monitor = indices
    if cfg.holdout_fraction > 0:
        shuffled = [int(k) for k in rng.permutation(n)]
        held = max(2, int(round(cfg.holdout_fraction * n)))
        monitor, indices = sorted(shuffled[:held]), sorted(shuffled[held:])
        if len(indices) < 2:
            raise ValueError("holdout_fraction leaves fewer than two training cells")

    def monitored_loss() -> float:
        with torch.no_grad():
            return float(_objective(predictor, samples, hashes, targets, monitor, cfg.loss))

    optimizer = make_adam(predictor, cfg.lr)
    result = FinetuneResult(predictor=predictor, batch_size=batch)
    best_loss = monitored_loss()
    best_state = copy.deepcopy(predictor.state_dict())
    result.trace.append((0, best_loss))
    wait = 0
    tracker = ProgressTracker(cfg.max_epochs, "Fine-tuning", verbose=verbose)

    for epoch in range(1, cfg.max_epochs + 1):
        order = [indices[int(k)] for k in rng.permutation(len(indices))]
        for start in range(0, len(order), batch):
            chunk = order[start:start + batch]
            loss = _objective(predictor, samples, hashes, targets, chunk, cfg.loss)
            adam_step(optimizer, predictor, backward(loss, predictor))

        current = monitored_loss()
        result.trace.append((epoch, current))
        if current < best_loss - cfg.min_delta:
            best_loss, result.best_epoch, wait = current, epoch, 0
            best_state = copy.deepcopy(predictor.state_dict())
        else:
            wait += 1
        tracker.update(detail=f"loss {current:.5f}")
        if wait >= cfg.patience:
            result.stopped_early = True
            break

    tracker.finish()
    predictor.load_state_dict(best_state)
    result.best_loss = best_loss
    return result


def save_predictor(path: Union[str, Path], predictor: Predictor) -> None:
    """Encoder and head weights, loss kind and normalization statistics."""
    config = {
        "encoder": predictor.encoder.config.to_json(),
        "head_hidden": predictor.head.hidden,
        "loss": predictor.loss.value,
    }
    save_checkpoint(path, "predictor", config,
                    {"encoder": predictor.encoder, "head": predictor.head},
                    extra={"mean": predictor.mean, "std": predictor.std})


def load_predictor(path: Union[str, Path], expected: Optional[EncoderConfig] = None) -> Predictor:
    payload = load_checkpoint(path, "predictor")
    config = payload["config"]
    encoder_config = EncoderConfig.from_json(config["encoder"])
    if expected is not None and encoder_config.vocabulary != expected.vocabulary:
        raise ArtifactError(
            f"predictor {path} was trained on {len(encoder_config.vocabulary)} node labels, "
            f"the configured space has {len(expected.vocabulary)}")
    encoder = restore_module(GINEncoder(encoder_config), payload, "encoder")
    head = restore_module(MlpHead(encoder_config.embedding_dim, int(config["head_hidden"])), payload, "head")
    extra = payload["extra"]
    predictor = Predictor(encoder, head, LossKind(config["loss"]),
                          float(extra.get("mean", 0.0)), float(extra.get("std", 1.0)))
    predictor.eval()
    return predictor
