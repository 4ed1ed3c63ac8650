"""
Contrastive pre-training of the GIN encoder.
Positives come from graph augmentation picked by the curriculum scheduler; negatives are the
other cells of the batch plus a FIFO memory bank of earlier embeddings.
"""

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .augment import AugmentationSpec, augmentable, generate_candidates
from .cellgraph import MARKERS, CellGraph
from .curriculum import CurriculumConfig, select, temperature
from .difficulty import edit_difficulty
from .errors import NumericError
from .neuralcore import DTYPE, GINEncoder, backward, make_sgd, sgd_step
from .utils import ProgressTracker, parallel_map, spawn_rngs


class DifficultyMeasure(str, Enum):
    """How a candidate positive's difficulty is scored."""

    EDIT = "edit"
    EMBEDDING = "embedding"


@dataclass(frozen=True)
class ContrastiveConfig:
    """InfoNCE, memory bank and optimizer settings of the pre-training stage."""

    temperature: float = 0.2
    rbf_sigma: float = 1.0
    bank_capacity: int = 4096
    batch_size: int = 4096
    epochs: int = 50
    lr: float = 0.015
    momentum: float = 0.9
    candidates: int = 8
    difficulty_measure: DifficultyMeasure = DifficultyMeasure.EDIT
    checkpoint_every: int = 10

    def __post_init__(self):
        object.__setattr__(self, "difficulty_measure", DifficultyMeasure(self.difficulty_measure))
        for name in ("temperature", "rbf_sigma", "bank_capacity", "batch_size", "epochs", "lr",
                     "candidates", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    @classmethod
    def desk(cls, **overrides) -> "ContrastiveConfig":
        """CPU-sized defaults: batch 256, bank 1024."""
        return dataclasses.replace(cls(batch_size=256, bank_capacity=1024), **overrides)


def rbf_similarity(z1: torch.Tensor, z2: torch.Tensor, sigma: float = 1.0) -> torch.Tensor:
    """exp(-||z1 - z2||^2 / (2 sigma^2)), broadcasting over leading dimensions."""
    if z1.shape[-1] != z2.shape[-1]:
        raise ValueError(f"embedding lengths differ: {z1.shape[-1]} vs {z2.shape[-1]}")
    d = ((z1 - z2) ** 2).sum(dim=-1)
    return torch.exp(-d / (2.0 * sigma ** 2))


def rbf_matrix(a: torch.Tensor, b: torch.Tensor, sigma: float = 1.0) -> torch.Tensor:
    """Pairwise RBF similarities between the rows of a and the rows of b."""
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"embedding lengths differ: {a.shape[-1]} vs {b.shape[-1]}")
    d = (a * a).sum(1, keepdim=True) + (b * b).sum(1).unsqueeze(0) - 2.0 * a @ b.T
    return torch.exp(-d.clamp_min(0.0) / (2.0 * sigma ** 2))


def info_nce_from_similarities(positive: torch.Tensor, negatives: torch.Tensor, tau: float,
                               keep: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean of -log softmax over [positive, negatives] / tau, row by row.

    positive has shape (B,) and negatives (B, M); a 0-d positive with 1-d negatives is one row.
    keep, shaped like negatives, drops the negatives marked False.
    """
    if negatives.numel() == 0:
        raise ValueError("InfoNCE needs at least one negative")
    if positive.dim() == 0:
        positive, negatives = positive.reshape(1), negatives.reshape(1, -1)
        keep = None if keep is None else keep.reshape(1, -1)
    scaled = negatives / tau
    if keep is not None:
        if not bool(keep.any(dim=1).all()):
            raise ValueError("InfoNCE needs at least one negative in every row")
        scaled = scaled.masked_fill(~keep, float("-inf"))
    logits = torch.cat([(positive / tau).unsqueeze(1), scaled], dim=1)
    return (torch.logsumexp(logits, dim=1) - positive / tau).mean()


def info_nce(q: torch.Tensor, k_plus: torch.Tensor, negatives: torch.Tensor,
             tau: float = 0.2, sigma: float = 1.0) -> torch.Tensor:
    """InfoNCE for one query with RBF similarities to its positive and negatives (rows)."""
    if negatives.dim() != 2 or negatives.shape[0] == 0:
        raise ValueError("InfoNCE needs at least one negative")
    positive = rbf_similarity(q, k_plus, sigma)
    negative = rbf_matrix(q.unsqueeze(0), negatives, sigma)[0]
    return info_nce_from_similarities(positive, negative, tau)


def batch_contrastive_loss(z_origin: torch.Tensor, z_positive: torch.Tensor,
                           bank: Optional[torch.Tensor], tau: float, sigma: float,
                           keys: Optional[torch.Tensor] = None,
                           bank_keys: Optional[torch.Tensor] = None) -> torch.Tensor:
    """InfoNCE over a batch: row i's positive is z_positive[i], its negatives every other
    positive of the batch and every bank entry.

    Given keys and bank_keys, a bank entry stored under row i's key is no negative for row i.
    """
    sims = rbf_matrix(z_origin, z_positive, sigma)
    positive = torch.diagonal(sims)
    b = sims.shape[0]
    off_diagonal = ~torch.eye(b, dtype=torch.bool)
    negatives = sims[off_diagonal].reshape(b, b - 1)
    keep = None
    if bank is not None and bank.shape[0] > 0:
        negatives = torch.cat([negatives, rbf_matrix(z_origin, bank, sigma)], dim=1)
        if keys is not None and bank_keys is not None:
            own = keys.reshape(-1, 1) == bank_keys.reshape(1, -1)
            keep = torch.cat([torch.ones(b, b - 1, dtype=torch.bool), ~own], dim=1)
    return info_nce_from_similarities(positive, negatives, tau, keep)


class MemoryBank:
    """FIFO ring buffer of detached embeddings used as negatives.

    Every row carries an integer key naming the cell it embeds; -1 marks an unkeyed row.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("memory bank capacity must be positive")
        self.capacity = capacity
        self.cursor = 0
        self.pushes = 0
        self._store: Optional[torch.Tensor] = None
        self._keys = torch.full((capacity,), -1, dtype=torch.long)

    def __len__(self) -> int:
        return min(self.pushes, self.capacity)

    def push(self, embeddings: torch.Tensor, keys: Optional[Sequence[int]] = None) -> None:
        rows = embeddings.detach().to(DTYPE)
        if keys is not None and len(keys) != rows.shape[0]:
            raise ValueError(f"{len(keys)} keys for {rows.shape[0]} embeddings")
        if self._store is None:
            self._store = torch.zeros(self.capacity, rows.shape[1], dtype=DTYPE)
        for index, row in enumerate(rows):
            self._store[self.cursor] = row
            self._keys[self.cursor] = -1 if keys is None else int(keys[index])
            self.cursor = (self.cursor + 1) % self.capacity
            self.pushes += 1

    def _ordered(self, store: torch.Tensor) -> torch.Tensor:
        if self.pushes < self.capacity:
            return store[: self.pushes].clone()
        return torch.cat([store[self.cursor:], store[: self.cursor]]).clone()

    def tensor(self) -> Optional[torch.Tensor]:
        """Stored entries, oldest first; None while empty."""
        if self._store is None or len(self) == 0:
            return None
        return self._ordered(self._store)

    def keys(self) -> Optional[torch.Tensor]:
        """Keys of the stored entries in tensor() order."""
        if self._store is None or len(self) == 0:
            return None
        return self._ordered(self._keys)


@dataclass(frozen=True)
class StepLoss:
    step: int
    epoch: int
    loss: float


@dataclass(frozen=True)
class SelectionRecord:
    """What the curriculum picked at one origin of one step."""

    step: int
    tau: float
    chosen: int
    chosen_difficulty: float
    min_difficulty: float
    max_difficulty: float


@dataclass
class PretrainResult:
    """Trained encoder plus its traces."""

    encoder: GINEncoder
    epoch_losses: List[float] = field(default_factory=list)
    step_losses: List[StepLoss] = field(default_factory=list)
    selections: List[SelectionRecord] = field(default_factory=list)
    total_steps: int = 0
    dropped: int = 0


def embedding_difficulties(encoder: GINEncoder, origin: CellGraph, candidates, sigma: float) -> List[float]:
    """1 - RBF similarity between the origin's and each candidate's current embedding."""
    with torch.no_grad():
        z = encoder.embed([origin] + [c.graph for c in candidates])
        return (1.0 - rbf_similarity(z[:1], z[1:], sigma)).tolist()


def pretrain(graphs: Sequence[CellGraph], encoder: GINEncoder, curriculum: CurriculumConfig,
             contrastive: ContrastiveConfig, augmentation: AugmentationSpec,
             rng: np.random.Generator, workers: int = 1, verbose: bool = False,
             on_checkpoint: Optional[Callable[[int, GINEncoder], None]] = None) -> PretrainResult:
    """Curriculum-guided contrastive pre-training; deterministic given rng."""
    augmentation = dataclasses.replace(augmentation, candidates=contrastive.candidates)
    pool = [g for g in graphs if augmentable(g, augmentation)]
    if len(pool) < 2:
        raise ValueError(f"pre-training needs at least two augmentable cells, got {len(pool)}")
    operations = [op for op in encoder.config.vocabulary if op not in MARKERS]

    steps_per_epoch = math.ceil(len(pool) / contrastive.batch_size)
    total_steps = contrastive.epochs * steps_per_epoch
    schedule = curriculum.with_steps(total_steps)
    optimizer = make_sgd(encoder, contrastive.lr, contrastive.momentum)
    bank = MemoryBank(contrastive.bank_capacity)
    result = PretrainResult(encoder=encoder, total_steps=total_steps, dropped=len(graphs) - len(pool))
    tracker = ProgressTracker(contrastive.epochs, "Pre-training", verbose=verbose)

    def make_candidates(task):
        g, child = task
        return generate_candidates(g, augmentation, operations, child)

    t = 0
    for epoch in range(1, contrastive.epochs + 1):
        order = rng.permutation(len(pool))
        epoch_total = 0.0
        for start in range(0, len(pool), contrastive.batch_size):
            t += 1
            indices = [int(k) for k in order[start:start + contrastive.batch_size]]
            origins = [pool[k] for k in indices]
            children = spawn_rngs(rng, len(origins))
            candidate_sets = parallel_map(make_candidates, list(zip(origins, children)), workers)

            tau_t = temperature(schedule, t)
            positives = []
            for origin, candidates in zip(origins, candidate_sets):
                if contrastive.difficulty_measure is DifficultyMeasure.EMBEDDING:
                    difficulties = embedding_difficulties(encoder, origin, candidates, contrastive.rbf_sigma)
                else:
                    difficulties = [edit_difficulty(c).value for c in candidates]
                index = select(schedule, t, candidates, rng, difficulties)
                positives.append(candidates[index].graph)
                result.selections.append(SelectionRecord(
                    step=t, tau=tau_t, chosen=index, chosen_difficulty=difficulties[index],
                    min_difficulty=min(difficulties), max_difficulty=max(difficulties)))

            z_origin = encoder.embed(origins)
            z_positive = encoder.embed(positives)
            loss = batch_contrastive_loss(z_origin, z_positive, bank.tensor(),
                                          contrastive.temperature, contrastive.rbf_sigma,
                                          keys=torch.tensor(indices, dtype=torch.long),
                                          bank_keys=bank.keys())
            value = float(loss)
            if not math.isfinite(value):
                raise NumericError(f"contrastive loss became {value} at step {t}")
            sgd_step(optimizer, encoder, backward(loss, encoder))
            bank.push(z_origin, indices)

            result.step_losses.append(StepLoss(step=t, epoch=epoch, loss=value))
            epoch_total += value * len(origins)

        result.epoch_losses.append(epoch_total / len(pool))
        tracker.update(detail=f"loss {result.epoch_losses[-1]:.4f}")
        if on_checkpoint is not None and (epoch % contrastive.checkpoint_every == 0 or epoch == contrastive.epochs):
            on_checkpoint(epoch, encoder)

    tracker.finish()
    return result


def pair_similarity(encoder: GINEncoder, graphs: Sequence[CellGraph], augmentation: AugmentationSpec,
                    rng: np.random.Generator, sigma: float = 1.0) -> Tuple[float, float]:
    """Mean positive-pair similarity and mean similarity between different cells."""
    operations = [op for op in encoder.config.vocabulary if op not in MARKERS]
    single = dataclasses.replace(augmentation, candidates=1)
    positives = [generate_candidates(g, single, operations, rng)[0].graph for g in graphs]
    with torch.no_grad():
        z = encoder.embed(list(graphs))
        z_pos = encoder.embed(positives)
        positive = rbf_similarity(z, z_pos, sigma).mean().item()
        sims = rbf_matrix(z, z, sigma)
        n = sims.shape[0]
        negative = ((sims.sum() - torch.diagonal(sims).sum()) / (n * (n - 1))).item()
    return positive, negative


def write_loss_csv(path: Union[str, Path], step_losses: Sequence[StepLoss]) -> None:
    """step, epoch, loss rows with full float precision."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["step", "epoch", "loss"])
        for row in step_losses:
            writer.writerow([row.step, row.epoch, repr(row.loss)])
