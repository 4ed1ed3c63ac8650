"""
Pipeline stages behind the command-line entry point.
Each stage reads a resolved RunConfig, writes its artifacts to output_dir and returns a summary.
"""

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .config import RunConfig, config_digest, write_config_echo
from .evalkit import RankReport, percentile_rank, rank_report, write_rank_pairs, write_report
from .neuralcore import GINEncoder, build_encoder, load_encoder, save_encoder
from .predictor import (
    FinetuneResult, LabeledSample, Predictor, finetune, load_predictor, predict, save_predictor,
)
from .pretrain import PretrainResult, pretrain, write_loss_csv
from .search import GroundTruth, SearchResult, run_search as search_driver, write_search_log
from .spaces import (
    BenchmarkTable, SearchSpaceSpec, SpaceSampler, SyntheticOracle, TableSpace, build_table,
    default_oracle, load_graphs, load_table, sample_distinct, synthetic_performance, write_table,
)
from .utils import create_directory_if_not_exists, format_bytes, format_duration


STAGE_KEYS = {"pretrain": 1, "finetune": 2, "eval": 3, "search": 4, "oracle-export": 5}


def stage_rng(config: RunConfig, stage: str) -> np.random.Generator:
    """Generator for one stage; stages draw from independent streams of the run seed."""
    return np.random.default_rng([int(config.seed), STAGE_KEYS[stage]])


@dataclass
class GroundTruthSource:
    """The configured ground truth: a loaded table or a synthetic oracle."""

    space: SearchSpaceSpec
    table: Optional[BenchmarkTable] = None
    oracle: Optional[SyntheticOracle] = None

    @classmethod
    def from_config(cls, config: RunConfig) -> "GroundTruthSource":
        space = config.space_spec()
        if config.space.ground_truth == "table":
            return cls(space=space, table=load_table(config.space.table, space))
        return cls(space=space, oracle=default_oracle(space, config.space.oracle_seed, config.space.oracle_noise))

    def labeled(self, count: int, rng: np.random.Generator) -> List[LabeledSample]:
        """count distinct labeled cells drawn uniformly."""
        if self.table is not None:
            records = list(self.table.records.values())
            picks = rng.choice(len(records), size=min(count, len(records)), replace=False)
            return [LabeledSample(records[int(k)].graph, records[int(k)].accuracy) for k in picks]
        graphs = sample_distinct(self.space, count, rng)
        return [LabeledSample(g, synthetic_performance(self.oracle, g)) for g in graphs]

    def population(self, sample_count: int, rng: np.random.Generator) -> BenchmarkTable:
        """The cells predictors are ranked on: the whole table, or an oracle-scored sample."""
        if self.table is not None:
            return self.table
        return build_table(self.space, self.oracle, sample_count, rng)


def _prepare(config: RunConfig, verbose: bool) -> Path:
    create_directory_if_not_exists(config.output_dir, verbose=verbose)
    return Path(config.output_dir)


def _announce(path: Path, verbose: bool) -> None:
    if verbose:
        print(f"💾 Wrote {path.name} ({format_bytes(path.stat().st_size)})")


def run_pretrain(config: RunConfig, verbose: bool = True) -> PretrainResult:
    """Pre-train the encoder; writes encoder.pt, periodic checkpoints and pretrain_loss.csv."""
    out = _prepare(config, verbose)
    rng = stage_rng(config, "pretrain")
    space = config.space_spec()
    truth = GroundTruthSource.from_config(config)

    if config.pretrain.unlabeled_source:
        graphs = load_graphs(config.pretrain.unlabeled_source, space)
    elif truth.table is not None:
        graphs = [s.graph for s in truth.labeled(config.pretrain.unlabeled_count, rng)]
    else:
        graphs = sample_distinct(space, config.pretrain.unlabeled_count, rng)
    if verbose:
        print(f"🧩 {len(graphs)} unlabeled cells from space '{space.name}'")

    encoder = build_encoder(config.encoder_config(), rng)

    def checkpoint(epoch: int, current: GINEncoder) -> None:
        path = out / f"encoder_epoch{epoch:03d}.pt"
        save_encoder(path, current, extra={"epoch": epoch})
        _announce(path, verbose)

    result = pretrain(graphs, encoder, config.curriculum_config(), config.contrastive(),
                      config.augmentation(), rng, workers=config.workers, verbose=verbose,
                      on_checkpoint=checkpoint)
    if result.dropped and verbose:
        print(f"⚠️  Skipped {result.dropped} cells with too few legal edge flips")

    save_encoder(out / "encoder.pt", result.encoder, extra={"epoch": len(result.epoch_losses)})
    write_loss_csv(out / "pretrain_loss.csv", result.step_losses)
    write_config_echo(config, "pretrain")
    _announce(out / "encoder.pt", verbose)
    return result


def _load_labels(config: RunConfig, truth: GroundTruthSource, rng: np.random.Generator) -> List[LabeledSample]:
    if config.finetune.labels:
        table = load_table(config.finetune.labels, truth.space)
        return [LabeledSample(r.graph, r.accuracy) for r in table.records.values()]
    return truth.labeled(config.finetune.label_count, rng)


def _label_budget(config: RunConfig, truth: GroundTruthSource) -> int:
    """How many ground-truth labels fine-tuning consumed."""
    if config.finetune.labels:
        return len(load_table(config.finetune.labels, truth.space))
    return config.finetune.label_count


def write_finetune_trace(path: Path, result: FinetuneResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["epoch", "loss"])
        for epoch, loss in result.trace:
            writer.writerow([epoch, repr(loss)])


def run_finetune(config: RunConfig, verbose: bool = True) -> FinetuneResult:
    """Fine-tune on the labels file (or sampled labels); writes predictor.pt and finetune_trace.csv."""
    out = _prepare(config, verbose)
    rng = stage_rng(config, "finetune")
    truth = GroundTruthSource.from_config(config)
    samples = _load_labels(config, truth, rng)

    encoder = None
    if config.finetune.pretrained:
        path = config.finetune.encoder_checkpoint or str(out / "encoder.pt")
        encoder = load_encoder(path, expected=config.encoder_config())
    cfg = config.finetune_config()
    if verbose:
        source = "pre-trained encoder" if encoder is not None else "random initialization"
        print(f"🏷️  {len(samples)} labeled cells, batch size {cfg.batch_size(len(samples))}, "
              f"loss {cfg.loss.value}, {source}")

    result = finetune(encoder, samples, cfg, rng, encoder_config=config.encoder_config(), verbose=verbose)
    save_predictor(out / "predictor.pt", result.predictor)
    write_finetune_trace(out / "finetune_trace.csv", result)
    write_config_echo(config, "finetune")
    _announce(out / "predictor.pt", verbose)
    return result


def _predictor(config: RunConfig, override: Optional[str]) -> Predictor:
    path = override or str(Path(config.output_dir) / "predictor.pt")
    return load_predictor(path, expected=config.encoder_config())


def run_eval(config: RunConfig, verbose: bool = True) -> RankReport:
    """Kendall's tau of the predictor over the evaluation population; writes eval_report.json."""
    out = _prepare(config, verbose)
    start = time.time()
    rng = stage_rng(config, "eval")
    truth = GroundTruthSource.from_config(config)
    predictor = _predictor(config, config.eval.predictor)
    population = truth.population(config.eval.sample_count, rng)

    graphs = population.graphs()
    true_scores = population.accuracies()
    pred_scores = predict(predictor, graphs, workers=config.workers)
    report = rank_report(pred_scores, true_scores, query_budget=_label_budget(config, truth),
                         seed=config.seed, config_digest=config_digest(config),
                         wall_time=time.time() - start)
    write_report(out / "eval_report.json", report)
    write_rank_pairs(out / "rank_pairs.csv", pred_scores, true_scores)
    write_config_echo(config, "eval")
    if verbose:
        print(f"📈 Ranked {report.n} cells in {format_duration(report.wall_time)}")
    return report


def run_search(config: RunConfig, verbose: bool = True) -> Tuple[SearchResult, dict]:
    """Predictor-guided search; writes search_log.jsonl and search_report.json."""
    out = _prepare(config, verbose)
    start = time.time()
    rng = stage_rng(config, "search")
    truth = GroundTruthSource.from_config(config)
    predictor = _predictor(config, config.search.predictor)
    cfg = config.search_config()

    if truth.table is not None:
        source, ground_truth = TableSpace(truth.table), GroundTruth.from_table(truth.table)
    else:
        source, ground_truth = SpaceSampler(truth.space), GroundTruth.from_oracle(truth.oracle)

    result = search_driver(source, lambda graphs: predict(predictor, graphs, workers=config.workers),
                           ground_truth, cfg, rng, verbose=verbose)
    percentile = None
    if truth.table is not None and result.best_accuracy is not None:
        percentile = percentile_rank(truth.table.accuracies(), result.best_accuracy)

    report = result.to_json()
    report.update({
        "percentile": percentile,
        "query_budget": cfg.query_budget,
        "seed": config.seed,
        "config_digest": config_digest(config),
        "wall_time": time.time() - start,
    })
    write_search_log(out / "search_log.jsonl", result.log)
    write_report_json(out / "search_report.json", report)
    write_config_echo(config, "search")
    return result, report


def write_report_json(path: Path, report: dict) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(report, handle, indent=2, sort_keys=True)
        handle.write("\n")


def run_oracle_export(config: RunConfig, verbose: bool = True) -> Tuple[Path, BenchmarkTable]:
    """Score cells with the synthetic oracle and write oracle_table.jsonl."""
    out = _prepare(config, verbose)
    rng = stage_rng(config, "oracle-export")
    space = config.space_spec()
    oracle = default_oracle(space, config.space.oracle_seed, config.space.oracle_noise)
    size = config.space.table_size or None
    if verbose:
        target = f"{size} sampled" if size else "every"
        print(f"🧮 Scoring {target} cell(s) of space '{space.name}' with the synthetic oracle")
    table = build_table(space, oracle, size, rng)
    path = out / "oracle_table.jsonl"
    write_table(table, path)
    write_config_echo(config, "oracle-export")
    _announce(path, verbose)
    return path, table
