"""
Predictor-guided architecture search: random sampling, evolution and REINFORCE policy search.
Every strategy keeps the top-K predicted cells of each iteration and spends ground-truth
queries only on that pool.
"""

import json
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Set, Tuple, Union

import numpy as np
import torch

from .cellgraph import CellGraph, GraphFormat, canonical_hash, normalize, to_json
from .errors import RuntimeFailure, SamplingError, SpaceExhaustedError
from .spaces import (
    BenchmarkTable, SearchSpaceSpec, SyntheticOracle, lookup_performance, synthetic_performance,
)
from .utils import ProgressTracker


Scorer = Callable[[Sequence[CellGraph]], np.ndarray]

# Sampling attempts allowed per requested unseen cell before the space counts as exhausted.
ATTEMPTS_PER_SAMPLE = 50


class SearchStrategy(str, Enum):
    RANDOM = "random"
    EVOLUTION = "evolution"
    RL = "rl"


@dataclass(frozen=True)
class SearchConfig:
    """Iterations T, samples per iteration N_t, kept cells K and strategy knobs."""

    strategy: SearchStrategy = SearchStrategy.RANDOM
    iterations: int = 10
    samples_per_iteration: int = 100
    top_k: int = 5
    population: int = 20
    max_population: int = 50
    policy_lr: float = 0.1
    baseline_decay: float = 0.9
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "strategy", SearchStrategy(self.strategy))
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.samples_per_iteration < 1:
            raise ValueError("samples_per_iteration must be >= 1")
        if not 0 <= self.top_k <= self.samples_per_iteration:
            raise ValueError("top_k must lie in [0, samples_per_iteration]")
        if self.population < 1 or self.max_population < self.population:
            raise ValueError("need 1 <= population <= max_population")
        if self.policy_lr <= 0 or not 0.0 <= self.baseline_decay < 1.0:
            raise ValueError("policy_lr must be positive and baseline_decay in [0, 1)")

    @property
    def query_budget(self) -> int:
        return self.top_k * self.iterations


class ArchitectureSource(Protocol):
    """Where candidate cells come from: a space definition or a finite table."""

    space: SearchSpaceSpec

    @property
    def size(self) -> Optional[int]: ...

    def sample(self, rng: np.random.Generator) -> CellGraph: ...

    def mutate(self, g: CellGraph, rng: np.random.Generator) -> CellGraph: ...

    def contains(self, g: CellGraph) -> bool: ...


class GroundTruth:
    """Counts ground-truth queries and refuses to evaluate an architecture twice."""

    def __init__(self, evaluate: Callable[[CellGraph], float]):
        self._evaluate = evaluate
        self.queried: Dict[str, float] = {}

    @classmethod
    def from_table(cls, table: BenchmarkTable) -> "GroundTruth":
        return cls(lambda g: lookup_performance(table, g))

    @classmethod
    def from_oracle(cls, oracle: SyntheticOracle) -> "GroundTruth":
        return cls(lambda g: synthetic_performance(oracle, g))

    @property
    def queries(self) -> int:
        return len(self.queried)

    def __call__(self, g: CellGraph, digest: Optional[str] = None) -> float:
        digest = digest or canonical_hash(g)
        if digest in self.queried:
            raise RuntimeFailure(f"architecture {digest[:12]} was already evaluated")
        value = float(self._evaluate(g))
        self.queried[digest] = value
        return value


@dataclass(frozen=True)
class PoolEntry:
    """A kept cell with its predicted score and provenance."""

    graph: CellGraph
    digest: str
    score: float
    iteration: int
    strategy: str
    parent_hash: Optional[str] = None


class CandidatePool:
    """Kept cells in insertion order, deduplicated by canonical hash."""

    def __init__(self):
        self._entries: Dict[str, PoolEntry] = {}

    def add(self, entry: PoolEntry) -> bool:
        if entry.digest in self._entries:
            return False
        self._entries[entry.digest] = entry
        return True

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, digest: str) -> bool:
        return digest in self._entries

    def entries(self) -> List[PoolEntry]:
        return list(self._entries.values())


@dataclass
class IterationLog:
    t: int
    sampled: int
    kept: List[str]
    best_predicted: Optional[float]
    policy_entropy: Optional[float] = None
    reward: Optional[float] = None

    def to_json(self) -> dict:
        row = {"t": self.t, "sampled": self.sampled, "kept": self.kept,
               "best_predicted": self.best_predicted}
        if self.policy_entropy is not None:
            row["policy_entropy"] = self.policy_entropy
            row["reward"] = self.reward
        return row


@dataclass
class SearchResult:
    """Best ground-truth architecture of the pool plus the run's traces."""

    strategy: SearchStrategy
    best_graph: Optional[CellGraph]
    best_hash: Optional[str]
    best_accuracy: Optional[float]
    best_predicted: Optional[float]
    queries: int
    pool: CandidatePool
    log: List[IterationLog] = field(default_factory=list)
    lineage: Dict[str, Optional[str]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "best": None if self.best_graph is None else {
                "hash": self.best_hash,
                "graph": to_json(self.best_graph),
                "accuracy": self.best_accuracy,
                "predicted": self.best_predicted,
            },
            "queries": self.queries,
            "pool_size": len(self.pool),
            "iterations": len(self.log),
        }


def _top_k(graphs: Sequence[CellGraph], digests: Sequence[str], scores: np.ndarray,
            k: int) -> List[int]:
    """Indices of the k best scores; ties go to the smaller hash."""
    order = sorted(range(len(graphs)), key=lambda i: (-float(scores[i]), digests[i]))
    return order[:k]


def sample_unseen(source: ArchitectureSource, rng: np.random.Generator, count: int,
                  seen: Set[str], draw: Optional[Callable[[], CellGraph]] = None
                  ) -> Tuple[List[CellGraph], List[str]]:
    """count distinct cells whose hashes are not in seen; seen is updated in place."""
    graphs: List[CellGraph] = []
    digests: List[str] = []
    if draw is None and source.size is not None:
        remaining = [(d, g) for d, g in source.members() if d not in seen]
        if len(remaining) < count:
            raise SpaceExhaustedError(
                f"only {len(remaining)} unseen architectures left, {count} requested")
        for k in sorted(int(i) for i in rng.choice(len(remaining), size=count, replace=False)):
            digest, g = remaining[k]
            seen.add(digest)
            graphs.append(g)
            digests.append(digest)
        return graphs, digests

    draw = draw or (lambda: source.sample(rng))
    attempts = 0
    budget = count * ATTEMPTS_PER_SAMPLE + 100
    while len(graphs) < count:
        attempts += 1
        if attempts > budget:
            raise SpaceExhaustedError(
                f"found {len(graphs)} of {count} unseen architectures in {budget} draws")
        g = draw()
        digest = canonical_hash(g)
        if digest in seen:
            continue
        seen.add(digest)
        graphs.append(g)
        digests.append(digest)
    return graphs, digests


def _finalize(strategy: SearchStrategy, pool: CandidatePool, ground_truth: GroundTruth,
              log: List[IterationLog], lineage: Optional[Dict[str, Optional[str]]] = None) -> SearchResult:
    best: Optional[PoolEntry] = None
    best_accuracy = -math.inf
    for entry in pool.entries():
        accuracy = ground_truth(entry.graph, entry.digest)
        if accuracy > best_accuracy:
            best, best_accuracy = entry, accuracy
    return SearchResult(
        strategy=strategy,
        best_graph=best.graph if best else None,
        best_hash=best.digest if best else None,
        best_accuracy=best_accuracy if best else None,
        best_predicted=best.score if best else None,
        queries=ground_truth.queries,
        pool=pool,
        log=log,
        lineage=lineage or {},
    )


def _keep(pool: CandidatePool, graphs, digests, scores, k: int, t: int, strategy: SearchStrategy,
          parents: Optional[Sequence[Optional[str]]] = None) -> List[PoolEntry]:
    kept = []
    for i in _top_k(graphs, digests, scores, k):
        entry = PoolEntry(graph=graphs[i], digest=digests[i], score=float(scores[i]), iteration=t,
                          strategy=strategy.value, parent_hash=parents[i] if parents else None)
        if pool.add(entry):
            kept.append(entry)
    return kept


def random_search(source: ArchitectureSource, scorer: Scorer, ground_truth: GroundTruth,
                  cfg: SearchConfig, rng: np.random.Generator, verbose: bool = False) -> SearchResult:
    """Sample unseen cells, keep the predicted top-K each iteration, pick the true best."""
    pool = CandidatePool()
    seen: Set[str] = set()
    log: List[IterationLog] = []
    tracker = ProgressTracker(cfg.iterations, "Random search", verbose=verbose)
    for t in range(1, cfg.iterations + 1):
        graphs, digests = sample_unseen(source, rng, cfg.samples_per_iteration, seen)
        scores = np.asarray(scorer(graphs), dtype=np.float64)
        kept = _keep(pool, graphs, digests, scores, cfg.top_k, t, SearchStrategy.RANDOM)
        log.append(IterationLog(t=t, sampled=len(graphs), kept=[e.digest for e in kept],
                                best_predicted=float(scores.max())))
        tracker.update(detail=f"pool {len(pool)}")
    tracker.finish()
    return _finalize(SearchStrategy.RANDOM, pool, ground_truth, log)


def evolution_search(source: ArchitectureSource, scorer: Scorer, ground_truth: GroundTruth,
                     cfg: SearchConfig, rng: np.random.Generator, verbose: bool = False) -> SearchResult:
    """Mutate uniformly chosen parents; the predicted top-K children join the population and
    the oldest members are evicted beyond max_population."""
    pool = CandidatePool()
    seen: Set[str] = set()
    log: List[IterationLog] = []
    initial, initial_digests = sample_unseen(source, rng, cfg.population, seen)
    population = deque(zip(initial, initial_digests))
    lineage: Dict[str, Optional[str]] = {d: None for d in initial_digests}
    tracker = ProgressTracker(cfg.iterations, "Evolution search", verbose=verbose)

    for t in range(1, cfg.iterations + 1):
        members = list(population)
        parents: List[str] = []

        def draw() -> CellGraph:
            parent, parent_digest = members[int(rng.integers(len(members)))]
            parents.append(parent_digest)
            return source.mutate(parent, rng)

        children: List[CellGraph] = []
        digests: List[str] = []
        child_parents: List[str] = []
        attempts = 0
        budget = cfg.samples_per_iteration * ATTEMPTS_PER_SAMPLE + 100
        while len(children) < cfg.samples_per_iteration:
            attempts += 1
            if attempts > budget:
                raise SpaceExhaustedError(
                    f"mutation found {len(children)} of {cfg.samples_per_iteration} unseen children")
            try:
                child = draw()
            except SamplingError:
                continue
            digest = canonical_hash(child)
            if digest in seen:
                continue
            seen.add(digest)
            children.append(child)
            digests.append(digest)
            child_parents.append(parents[-1])

        scores = np.asarray(scorer(children), dtype=np.float64)
        kept = _keep(pool, children, digests, scores, cfg.top_k, t, SearchStrategy.EVOLUTION, child_parents)
        for entry in kept:
            population.append((entry.graph, entry.digest))
            lineage[entry.digest] = entry.parent_hash
        while len(population) > cfg.max_population:
            population.popleft()
        log.append(IterationLog(t=t, sampled=len(children), kept=[e.digest for e in kept],
                                best_predicted=float(scores.max())))
        tracker.update(detail=f"population {len(population)}")

    tracker.finish()
    return _finalize(SearchStrategy.EVOLUTION, pool, ground_truth, log, lineage)


class CategoricalPolicy:
    """Independent categorical distribution over operations at every decision site."""

    def __init__(self, sites: int, choices: Sequence[str], lr: float = 0.1):
        self.choices = tuple(choices)
        self.index = {op: k for k, op in enumerate(self.choices)}
        self.logits = torch.zeros(sites, len(self.choices), dtype=torch.float64, requires_grad=True)
        self.optimizer = torch.optim.Adam([self.logits], lr=lr)

    @property
    def sites(self) -> int:
        return self.logits.shape[0]

    def probabilities(self) -> np.ndarray:
        with torch.no_grad():
            return torch.softmax(self.logits, dim=1).numpy().copy()

    def entropy(self) -> float:
        with torch.no_grad():
            log_p = torch.log_softmax(self.logits, dim=1)
            return float(-(log_p.exp() * log_p).sum())

    def sample_choices(self, rng: np.random.Generator) -> List[int]:
        probs = self.probabilities()
        return [int(rng.choice(len(self.choices), p=probs[s] / probs[s].sum())) for s in range(self.sites)]

    def log_prob(self, choices: Sequence[int]) -> torch.Tensor:
        """Log-probability of decisions for the leading len(choices) sites; later sites are masked."""
        log_p = torch.log_softmax(self.logits, dim=1)
        picks = torch.tensor(list(choices), dtype=torch.long)
        return log_p[torch.arange(len(picks)), picks].sum()

    def reinforce(self, decisions: Sequence[Sequence[int]], advantage: float) -> None:
        """One score-function step: raise the log-probability of decisions in proportion to advantage."""
        if not decisions:
            return
        loss = -advantage * torch.stack([self.log_prob(d) for d in decisions]).mean()
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()


def policy_sites(space: SearchSpaceSpec) -> int:
    """Interior nodes for OON spaces, edges for OOE spaces."""
    if space.format is GraphFormat.OON:
        return max(space.max_nodes - 2, 1)
    return space.max_edges


def apply_choices(g: CellGraph, choices: Sequence[int], ops: Sequence[str]) -> CellGraph:
    """Relabel the cell's sites with the chosen operations."""
    if g.format is GraphFormat.OON:
        node_ops = list(g.node_ops)
        for site, node in enumerate(g.interior_nodes()):
            node_ops[node] = ops[choices[site]]
        return normalize(CellGraph.oon(node_ops, g.edges))
    return CellGraph.ooe(g.node_count, {edge: ops[choices[site]] for site, edge in enumerate(g.sorted_edges())})


def used_sites(g: CellGraph) -> int:
    """How many leading policy sites apply_choices reads for this cell."""
    return len(g.interior_nodes()) if g.format is GraphFormat.OON else len(g.edges)


def draw_from_policy(source: ArchitectureSource, policy: CategoricalPolicy,
                     rng: np.random.Generator) -> Tuple[CellGraph, Optional[List[int]]]:
    """A cell labeled by the policy with the decisions it used, or a uniform cell and None.

    Sites past the base cell's used sites had no effect and are left out of the decisions.
    """
    for _ in range(ATTEMPTS_PER_SAMPLE):
        base = source.sample(rng)
        choices = policy.sample_choices(rng)
        candidate = apply_choices(base, choices, source.space.vocabulary)
        if source.size is None or source.contains(candidate):
            return candidate, choices[: used_sites(base)]
    return source.sample(rng), None


def rl_search(source: ArchitectureSource, scorer: Scorer, ground_truth: GroundTruth,
              cfg: SearchConfig, rng: np.random.Generator, verbose: bool = False) -> SearchResult:
    """REINFORCE over per-site operation choices.

    Reward is the mean predicted score of the iteration's top-K; the baseline starts at the
    first iteration's mean predicted score and then follows an exponential moving average of
    the reward.
    """
    space = source.space
    policy = CategoricalPolicy(policy_sites(space), space.vocabulary, cfg.policy_lr)
    pool = CandidatePool()
    seen: Set[str] = set()
    log: List[IterationLog] = []
    baseline: Optional[float] = None
    tracker = ProgressTracker(cfg.iterations, "RL search", verbose=verbose)

    decisions: Dict[str, List[int]] = {}

    def draw() -> CellGraph:
        g, choices = draw_from_policy(source, policy, rng)
        if choices is not None:
            decisions.setdefault(canonical_hash(g), choices)
        return g

    for t in range(1, cfg.iterations + 1):
        decisions.clear()
        graphs, digests = sample_unseen(source, rng, cfg.samples_per_iteration, seen, draw=draw)
        scores = np.asarray(scorer(graphs), dtype=np.float64)
        kept = _keep(pool, graphs, digests, scores, cfg.top_k, t, SearchStrategy.RL)
        top = _top_k(graphs, digests, scores, cfg.top_k)
        reward = float(np.mean(scores[top])) if top else 0.0
        if baseline is None:
            baseline = float(scores.mean())
        # uniform fallback cells were not sampled by the policy and earn it no credit
        credited = [decisions[digests[i]] for i in top if digests[i] in decisions]
        policy.reinforce(credited, reward - baseline)
        baseline = cfg.baseline_decay * baseline + (1.0 - cfg.baseline_decay) * reward
        log.append(IterationLog(t=t, sampled=len(graphs), kept=[e.digest for e in kept],
                                best_predicted=float(scores.max()), policy_entropy=policy.entropy(),
                                reward=reward))
        tracker.update(detail=f"reward {reward:.4f}")

    tracker.finish()
    return _finalize(SearchStrategy.RL, pool, ground_truth, log)


STRATEGIES = {
    SearchStrategy.RANDOM: random_search,
    SearchStrategy.EVOLUTION: evolution_search,
    SearchStrategy.RL: rl_search,
}


def run_search(source: ArchitectureSource, scorer: Scorer, ground_truth: GroundTruth,
               cfg: SearchConfig, rng: np.random.Generator, verbose: bool = False) -> SearchResult:
    return STRATEGIES[cfg.strategy](source, scorer, ground_truth, cfg, rng, verbose)


def write_search_log(path: Union[str, Path], log: Sequence[IterationLog]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for row in log:
            handle.write(json.dumps(row.to_json(), separators=(",", ":")) + "\n")
