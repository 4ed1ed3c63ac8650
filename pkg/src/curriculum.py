"""
Curriculum scheduler: a fluctuating difficulty-preference temperature and positive selection.
"""

import dataclasses
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .augment import AugmentedGraph
from .difficulty import edit_difficulty


# atanh is undefined at +-1; the schedule argument is clamped to this bound first.
U_CLAMP = 0.999


class SelectionMode(str, Enum):
    """How a positive is picked from its candidate set."""

    ARGMAX = "argmax"
    STOCHASTIC = "stochastic"
    RANDOM = "random"


@dataclass(frozen=True)
class CurriculumConfig:
    """Parameters of the temperature schedule (tau_1, tau_T, sigma, n, k, T)."""

    tau_start: float = -1.0
    tau_end: float = 1.0
    sigma: float = 0.9
    frequency: float = 2.0
    amplitude: float = 4.0
    total_steps: int = 1
    selection_mode: SelectionMode = SelectionMode.ARGMAX

    def __post_init__(self):
        object.__setattr__(self, "selection_mode", SelectionMode(self.selection_mode))
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.frequency <= 1:
            raise ValueError("frequency n must be > 1")
        if self.amplitude <= 1:
            raise ValueError("amplitude k must be > 1")

    @property
    def tau_mid(self) -> float:
        return (self.tau_start + self.tau_end) / 2.0

    def with_steps(self, total_steps: int) -> "CurriculumConfig":
        return dataclasses.replace(self, total_steps=total_steps)

    def reversed(self) -> "CurriculumConfig":
        """Hard-to-easy schedule: the temperature endpoints swapped."""
        return dataclasses.replace(self, tau_start=self.tau_end, tau_end=self.tau_start)


def schedule_argument(cfg: CurriculumConfig, t: float) -> float:
    """u_t = (t/T) sigma + (sigma/k) sin(n pi t / T), before clamping."""
    T = cfg.total_steps
    return (t / T) * cfg.sigma + (cfg.sigma / cfg.amplitude) * math.sin(cfg.frequency * math.pi * t / T)


def temperature(cfg: CurriculumConfig, t: float) -> float:
    """tau_t at step t (1 <= t <= T)."""
    if t < 0 or t > cfg.total_steps:
        raise ValueError(f"step {t} is outside [0, {cfg.total_steps}]")
    u = min(max(schedule_argument(cfg, t), -U_CLAMP), U_CLAMP)
    sigma_t = math.atanh(u)
    return (cfg.tau_end - cfg.tau_mid) / cfg.sigma * math.tanh(sigma_t) + cfg.tau_mid


def preference_softmax(tau: float, difficulties: Sequence[float]) -> np.ndarray:
    """softmax(tau * L_i) with max-subtraction."""
    values = np.asarray(difficulties, dtype=np.float64)
    if values.size == 0:
        raise ValueError("need at least one difficulty")
    if not np.all(np.isfinite(values)):
        raise ValueError("difficulties must be finite")
    logits = tau * values
    logits = logits - logits.max()
    weights = np.exp(logits)
    return weights / weights.sum()


def selection_probabilities(cfg: CurriculumConfig, t: float, difficulties: Sequence[float]) -> np.ndarray:
    """Probability of picking each candidate at step t."""
    return preference_softmax(temperature(cfg, t), difficulties)


def select(cfg: CurriculumConfig, t: float, candidates: Sequence[AugmentedGraph],
           rng: Optional[np.random.Generator] = None,
           difficulties: Optional[Sequence[float]] = None) -> int:
    """Index of the positive to train on at step t."""
    if not candidates:
        raise ValueError("select needs at least one candidate")
    if difficulties is None:
        difficulties = [edit_difficulty(c).value for c in candidates]
    if cfg.selection_mode is SelectionMode.RANDOM:
        return int(rng.integers(len(candidates)))
    probabilities = selection_probabilities(cfg, t, difficulties)
    if cfg.selection_mode is SelectionMode.STOCHASTIC:
        return int(rng.choice(len(candidates), p=probabilities))
    return int(np.argmax(probabilities))
