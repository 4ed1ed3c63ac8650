"""
Ranking metrics and experiment reports.
"""

import csv
import json
import statistics
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import kendalltau, rankdata


@dataclass
class RankReport:
    """Outcome of one predictor evaluation or search run."""

    tau: Optional[float]
    n: int
    percentile: Optional[float] = None
    query_budget: int = 0
    seed: Optional[int] = None
    config_digest: Optional[str] = None
    wall_time: Optional[float] = None

    def __post_init__(self):
        if self.tau is not None and abs(self.tau) > 1.0 + 1e-12:
            raise ValueError(f"tau {self.tau} is outside [-1, 1]")

    def to_json(self) -> dict:
        return asdict(self)


def kendall_tau(pred_scores: Sequence[float], true_scores: Sequence[float]) -> float:
    """Tie-corrected Kendall's tau-b."""
    pred = np.asarray(pred_scores, dtype=np.float64)
    true = np.asarray(true_scores, dtype=np.float64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ValueError(f"score vectors differ in shape: {pred.shape} vs {true.shape}")
    if pred.size < 2:
        raise ValueError("Kendall's tau needs at least two scores")
    if np.all(pred == pred[0]) or np.all(true == true[0]):
        raise ValueError("Kendall's tau is undefined when every score on one side is tied")
    tau, _ = kendalltau(pred, true, variant="b")
    return float(tau)


def percentile_rank(all_true_scores: Sequence[float], chosen_score: float) -> float:
    """Share of the population strictly better than the chosen score, in percent."""
    population = np.asarray(all_true_scores, dtype=np.float64)
    if population.size == 0:
        raise ValueError("percentile rank needs a non-empty population")
    return 100.0 * float(np.count_nonzero(population > chosen_score)) / population.size


def rank_report(pred_scores: Sequence[float], true_scores: Sequence[float], **fields) -> RankReport:
    return RankReport(tau=kendall_tau(pred_scores, true_scores), n=len(pred_scores), **fields)


def median_over_seeds(run: Callable[[int], float], seeds: Iterable[int]) -> Tuple[float, List[float]]:
    """Median of run(seed) over the seeds, plus every individual value."""
    values = [float(run(seed)) for seed in seeds]
    if not values:
        raise ValueError("median_over_seeds needs at least one seed")
    return statistics.median(values), values


def write_report(path: Union[str, Path], report: RankReport) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(report.to_json(), handle, indent=2, sort_keys=True)
        handle.write("\n")


def write_rank_pairs(path: Union[str, Path], pred_scores: Sequence[float],
                     true_scores: Sequence[float]) -> None:
    """Rank-vs-rank rows for scatter plots; rank 1 is the best score on each side."""
    pred_ranks = rankdata(-np.asarray(pred_scores, dtype=np.float64), method="average")
    true_ranks = rankdata(-np.asarray(true_scores, dtype=np.float64), method="average")
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["index", "pred_rank", "true_rank", "pred_score", "true_score"])
        for k, (pr, tr, ps, ts) in enumerate(zip(pred_ranks, true_ranks, pred_scores, true_scores)):
            writer.writerow([k, float(pr), float(tr), repr(float(ps)), repr(float(ts))])
