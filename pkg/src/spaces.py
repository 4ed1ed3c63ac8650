"""
Search spaces, tabular benchmarks and the synthetic performance oracle.
Sampling and mutation take a caller-owned numpy Generator; tables and oracles are immutable.
"""

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .cellgraph import (
    INPUT, OUTPUT, ZERO, CellGraph, GraphFormat, canonical_hash, from_json,
    longest_path_length, normalize, to_json, validate,
)
from .errors import (
    DuplicateRecordError, GraphError, MissingArchitectureError, SamplingError,
    SpaceExhaustedError, TableParseError,
)


MAX_SAMPLE_ATTEMPTS = 1000


@dataclass(frozen=True)
class SearchSpaceSpec:
    """Shape limits and operation vocabulary of a cell search space."""

    name: str
    format: GraphFormat
    max_nodes: int
    max_edges: int
    vocabulary: Tuple[str, ...]
    topology: str = "free"

    def __post_init__(self):
        if not self.vocabulary:
            raise ValueError(f"search space '{self.name}' has an empty vocabulary")
        if self.max_nodes < 2:
            raise ValueError(f"search space '{self.name}' needs max_nodes >= 2")

    @property
    def encoder_vocabulary(self) -> Tuple[str, ...]:
        """Node labels seen by the encoder: markers plus every operation."""
        return (INPUT, OUTPUT) + tuple(self.vocabulary)

    def validate(self, g: CellGraph) -> List[str]:
        """Violations of cell invariants plus this space's limits."""
        issues = list(validate(g, self.vocabulary).violations)
        if g.format is not self.format:
            issues.append(f"cell format {g.format.value} does not match space format {self.format.value}")
        if g.node_count > self.max_nodes:
            issues.append(f"{g.node_count} nodes exceed the limit of {self.max_nodes}")
        if len(g.edges) > self.max_edges:
            issues.append(f"{len(g.edges)} edges exceed the limit of {self.max_edges}")
        return issues

    def is_valid(self, g: CellGraph) -> bool:
        return not self.validate(g)


NB101 = SearchSpaceSpec(
    name="nb101",
    format=GraphFormat.OON,
    max_nodes=7,
    max_edges=9,
    vocabulary=("conv3x3-bn-relu", "conv1x1-bn-relu", "maxpool3x3"),
)

NB201 = SearchSpaceSpec(
    name="nb201",
    format=GraphFormat.OOE,
    max_nodes=4,
    max_edges=6,
    vocabulary=(ZERO, "skip_connect", "nor_conv_1x1", "nor_conv_3x3", "avg_pool_3x3"),
    topology="complete",
)

DARTS = SearchSpaceSpec(
    name="darts",
    format=GraphFormat.OOE,
    max_nodes=6,
    max_edges=11,
    vocabulary=("sep_conv_3x3", "sep_conv_5x5", "dil_conv_3x3", "dil_conv_5x5",
                "max_pool_3x3", "avg_pool_3x3", "skip_connect"),
    topology="darts",
)

PRESETS = {space.name: space for space in (NB101, NB201, DARTS)}


def get_space(name: str, **overrides) -> SearchSpaceSpec:
    """Preset by name, optionally with some fields replaced."""
    if name not in PRESETS:
        raise KeyError(f"unknown search space '{name}' (known: {', '.join(sorted(PRESETS))})")
    base = PRESETS[name]
    if not overrides:
        return base
    values = {
        "name": base.name, "format": base.format, "max_nodes": base.max_nodes,
        "max_edges": base.max_edges, "vocabulary": base.vocabulary, "topology": base.topology,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    values["vocabulary"] = tuple(values["vocabulary"])
    return SearchSpaceSpec(**values)


def _complete_edges(node_count: int) -> List[Tuple[int, int]]:
    return [(i, j) for i in range(node_count) for j in range(i + 1, node_count)]


def _prune(node_ops: Sequence[str], edges: Sequence[Tuple[int, int]]) -> Optional[CellGraph]:
    """Drop nodes off every input-output path; None when the output is unreachable."""
    n = len(node_ops)
    forward = {0}
    for i, j in sorted(edges):
        if i in forward:
            forward.add(j)
    backward = {n - 1}
    for i, j in sorted(edges, reverse=True):
        if j in backward:
            backward.add(i)
    if n - 1 not in forward:
        return None
    keep = [v for v in range(n) if v in forward and v in backward]
    position = {old: new for new, old in enumerate(keep)}
    return CellGraph.oon(
        [node_ops[v] for v in keep],
        [(position[i], position[j]) for i, j in edges if i in position and j in position],
    )


def _darts_edges(rng: np.random.Generator, node_count: int) -> List[Tuple[int, int]]:
    edges = []
    for j in range(1, node_count - 1):
        k = min(2, j)
        for i in sorted(rng.choice(j, size=k, replace=False).tolist()):
            edges.append((i, j))
    edges.extend((j, node_count - 1) for j in range(1, node_count - 1))
    return edges


def sample_uniform(space: SearchSpaceSpec, rng: np.random.Generator) -> CellGraph:
    """Draw a random valid cell of the space."""
    ops = space.vocabulary
    if space.format is GraphFormat.OOE:
        if space.topology == "darts":
            edges = _darts_edges(rng, space.max_nodes)
        else:
            edges = _complete_edges(space.max_nodes)
        choice = rng.integers(len(ops), size=len(edges))
        return CellGraph.ooe(space.max_nodes, {e: ops[int(c)] for e, c in zip(edges, choice)})

    n = space.max_nodes
    slots = _complete_edges(n)
    for _ in range(MAX_SAMPLE_ATTEMPTS):
        mask = rng.integers(2, size=len(slots))
        interior = rng.integers(len(ops), size=n - 2)
        node_ops = [INPUT] + [ops[int(c)] for c in interior] + [OUTPUT]
        pruned = _prune(node_ops, [slot for slot, bit in zip(slots, mask) if bit])
        if pruned is None:
            continue
        g = normalize(pruned)
        if space.is_valid(g):
            return g
    raise SamplingError(
        f"no valid cell of space '{space.name}' after {MAX_SAMPLE_ATTEMPTS} attempts")


def neighbors(space: SearchSpaceSpec, g: CellGraph) -> List[CellGraph]:
    """Every valid cell exactly one elementary edit away from g."""
    result = []
    if g.format is GraphFormat.OOE:
        for edge, op in g.edge_ops:
            for other in space.vocabulary:
                if other != op:
                    result.append(g.with_edge_op(edge, other))
        return result

    for node in g.interior_nodes():
        for other in space.vocabulary:
            if other != g.node_ops[node]:
                result.append(g.with_node_op(node, other))
    for slot in _complete_edges(g.node_count):
        flipped = g.edges - {slot} if slot in g.edges else g.edges | {slot}
        candidate = g.with_edges(flipped)
        if space.is_valid(candidate):
            result.append(candidate)
    return result


def mutate(space: SearchSpaceSpec, g: CellGraph, rng: np.random.Generator) -> CellGraph:
    """A uniformly chosen valid single-edit neighbor of g."""
    options = neighbors(space, g)
    if not options:
        raise SamplingError("cell has no valid single-edit neighbor")
    return options[int(rng.integers(len(options)))]


def _enumerate_oon(space: SearchSpaceSpec) -> Iterator[CellGraph]:
    for n in range(2, space.max_nodes + 1):
        slots = _complete_edges(n)
        for r in range(1, min(space.max_edges, len(slots)) + 1):
            for edges in itertools.combinations(slots, r):
                shape = CellGraph.oon([INPUT] + [space.vocabulary[0]] * (n - 2) + [OUTPUT], edges)
                if not validate(shape).is_valid:
                    continue
                for interior in itertools.product(space.vocabulary, repeat=n - 2):
                    yield CellGraph.oon([INPUT, *interior, OUTPUT], edges)


def _enumerate_ooe(space: SearchSpaceSpec) -> Iterator[CellGraph]:
    if space.topology == "darts":
        n = space.max_nodes
        choices = [list(itertools.combinations(range(j), min(2, j))) for j in range(1, n - 1)]
        topologies = (
            [(i, j + 1) for j, preds in enumerate(pick) for i in preds]
            + [(j, n - 1) for j in range(1, n - 1)]
            for pick in itertools.product(*choices)
        )
    else:
        topologies = iter([_complete_edges(space.max_nodes)])
    for edges in topologies:
        for ops in itertools.product(space.vocabulary, repeat=len(edges)):
            yield CellGraph.ooe(space.max_nodes, dict(zip(edges, ops)))


def enumerate_space(space: SearchSpaceSpec, limit: Optional[int] = None) -> Iterator[CellGraph]:
    """Yield each distinct architecture of the space at most once."""
    raw = _enumerate_ooe(space) if space.format is GraphFormat.OOE else _enumerate_oon(space)
    seen = set()
    for g in raw:
        if limit is not None and len(seen) >= limit:
            return
        if not space.is_valid(g):
            continue
        digest = canonical_hash(g)
        if digest in seen:
            continue
        seen.add(digest)
        yield normalize(g)


@dataclass(frozen=True)
class TableRecord:
    """One benchmark row."""

    graph: CellGraph
    accuracy: float
    metrics: Dict[str, float] = field(default_factory=dict)
    line: int = 0


@dataclass(frozen=True)
class BenchmarkTable:
    """Ground-truth accuracies keyed by canonical hash."""

    space: SearchSpaceSpec
    records: Dict[str, TableRecord]

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, g: CellGraph) -> bool:
        return canonical_hash(g) in self.records

    def graphs(self) -> List[CellGraph]:
        return [record.graph for record in self.records.values()]

    def accuracies(self) -> List[float]:
        return [record.accuracy for record in self.records.values()]


def lookup_performance(table: BenchmarkTable, g: CellGraph) -> float:
    """Stored accuracy of the cell (any isomorphic relabeling works)."""
    digest = canonical_hash(g)
    record = table.records.get(digest)
    if record is None:
        raise MissingArchitectureError(digest)
    return record.accuracy


def _parse_record(space: SearchSpaceSpec, path: str, line_no: int, text: str) -> TableRecord:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise TableParseError(path, line_no, f"invalid JSON ({e.msg})") from e
    if not isinstance(data, dict) or "graph" not in data or "accuracy" not in data:
        raise TableParseError(path, line_no, "record needs 'graph' and 'accuracy'")
    try:
        graph = from_json(data["graph"])
    except GraphError as e:
        raise TableParseError(path, line_no, str(e)) from e
    issues = space.validate(graph)
    if issues:
        raise TableParseError(path, line_no, "invalid cell: " + "; ".join(issues))
    try:
        accuracy = float(data["accuracy"])
        metrics = {str(k): float(v) for k, v in (data.get("metrics") or {}).items()}
    except (TypeError, ValueError) as e:
        raise TableParseError(path, line_no, f"non-numeric value ({e})") from e
    if not 0.0 <= accuracy <= 1.0 or math.isnan(accuracy):
        raise TableParseError(path, line_no, f"accuracy {accuracy} is outside [0, 1]")
    return TableRecord(graph=normalize(graph), accuracy=accuracy, metrics=metrics, line=line_no)


def load_table(path: Union[str, Path], space: SearchSpaceSpec) -> BenchmarkTable:
    """Read and eagerly validate a JSON Lines benchmark table."""
    path = str(path)
    records: Dict[str, TableRecord] = {}
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, text in enumerate(handle, 1):
            if not text.strip():
                continue
            record = _parse_record(space, path, line_no, text)
            digest = canonical_hash(record.graph)
            if digest in records:
                raise DuplicateRecordError(path, digest, records[digest].line, line_no)
            records[digest] = record
    return BenchmarkTable(space=space, records=records)


def load_graphs(path: Union[str, Path], space: SearchSpaceSpec) -> List[CellGraph]:
    """Unlabeled cells from JSON Lines: bare cell objects or table records (labels ignored)."""
    path = str(path)
    graphs = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, text in enumerate(handle, 1):
            if not text.strip():
                continue
            try:
                data = json.loads(text)
                graph = from_json(data["graph"] if "graph" in data else data)
            except json.JSONDecodeError as e:
                raise TableParseError(path, line_no, f"invalid JSON ({e.msg})") from e
            except (GraphError, TypeError) as e:
                raise TableParseError(path, line_no, str(e)) from e
            issues = space.validate(graph)
            if issues:
                raise TableParseError(path, line_no, "invalid cell: " + "; ".join(issues))
            graphs.append(normalize(graph))
    return graphs


def write_table(table: BenchmarkTable, path: Union[str, Path]) -> None:
    """Write the table in the JSON Lines interchange format."""
    with open(path, "w", encoding="utf-8") as handle:
        for record in table.records.values():
            row = {"graph": to_json(record.graph), "accuracy": record.accuracy}
            if record.metrics:
                row["metrics"] = record.metrics
            handle.write(json.dumps(row, separators=(",", ":")) + "\n")


def make_table(space: SearchSpaceSpec, rows: Sequence[Tuple[CellGraph, float]]) -> BenchmarkTable:
    """In-memory table from (cell, accuracy) pairs; isomorphic duplicates are rejected."""
    records: Dict[str, TableRecord] = {}
    for line_no, (graph, accuracy) in enumerate(rows, 1):
        digest = canonical_hash(graph)
        if digest in records:
            raise DuplicateRecordError("<memory>", digest, records[digest].line, line_no)
        records[digest] = TableRecord(graph=graph, accuracy=float(accuracy), line=line_no)
    return BenchmarkTable(space=space, records=records)


@dataclass(frozen=True)
class SyntheticOracle:
    """Deterministic stand-in for trained-network accuracy."""

    space: SearchSpaceSpec
    weights: Tuple[float, ...]
    noise_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        expected = len(self.space.vocabulary) + 2
        if len(self.weights) != expected:
            raise ValueError(f"oracle needs {expected} weights, got {len(self.weights)}")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")


def oracle_features(space: SearchSpaceSpec, g: CellGraph) -> np.ndarray:
    """Per-op counts, longest input-output path, edge count."""
    labels = g.node_ops[1:-1] if g.format is GraphFormat.OON else [op for _, op in g.edge_ops]
    counts = [sum(1 for label in labels if label == op) for op in space.vocabulary]
    return np.array(counts + [longest_path_length(g), len(g.edges)], dtype=np.float64)


def _hash_noise(seed: int, digest: str) -> float:
    """Uniform value in [-1, 1) keyed by seed and architecture."""
    raw = hashlib.sha256(f"{seed}:{digest}".encode("utf-8")).digest()
    return int.from_bytes(raw[:8], "big") / 2.0 ** 63 - 1.0


def synthetic_performance(oracle: SyntheticOracle, g: CellGraph) -> float:
    """logistic(weights . features) plus seeded hash noise, clamped into (0, 1)."""
    z = float(np.dot(oracle.weights, oracle_features(oracle.space, g)))
    score = 1.0 / (1.0 + math.exp(-z))
    if oracle.noise_scale:
        score += oracle.noise_scale * _hash_noise(oracle.seed, canonical_hash(g))
    eps = 1e-9
    return min(max(score, eps), 1.0 - eps)


def default_oracle(space: SearchSpaceSpec, seed: int = 0, noise_scale: float = 0.01) -> SyntheticOracle:
    """Oracle with seeded weights scaled to the space's feature ranges."""
    rng = np.random.default_rng(seed)
    op_weights = rng.normal(0.0, 0.6, size=len(space.vocabulary))
    path_weight = rng.normal(0.3, 0.2)
    edge_weight = rng.normal(-0.1, 0.1)
    weights = tuple(float(w) for w in list(op_weights) + [path_weight, edge_weight])
    return SyntheticOracle(space=space, weights=weights, noise_scale=noise_scale, seed=seed)


def sample_distinct(space: SearchSpaceSpec, count: int, rng: np.random.Generator) -> List[CellGraph]:
    """count pairwise non-isomorphic uniform samples, in draw order."""
    seen: Dict[str, CellGraph] = {}
    attempts = 0
    while len(seen) < count:
        attempts += 1
        if attempts > count * 50 + MAX_SAMPLE_ATTEMPTS:
            raise SpaceExhaustedError(
                f"found only {len(seen)} distinct cells of '{space.name}', {count} requested")
        g = sample_uniform(space, rng)
        seen.setdefault(canonical_hash(g), g)
    return list(seen.values())


def build_table(space: SearchSpaceSpec, oracle: SyntheticOracle, size: Optional[int],
                rng: np.random.Generator) -> BenchmarkTable:
    """Score `size` distinct sampled cells (or the whole space when size is None)."""
    graphs = list(enumerate_space(space)) if size is None else sample_distinct(space, size, rng)
    return make_table(space, [(g, synthetic_performance(oracle, g)) for g in graphs])


class SpaceSampler:
    """Architecture source backed by a search space definition."""

    def __init__(self, space: SearchSpaceSpec):
        self.space = space

    @property
    def size(self) -> Optional[int]:
        return None

    def sample(self, rng: np.random.Generator) -> CellGraph:
        return sample_uniform(self.space, rng)

    def mutate(self, g: CellGraph, rng: np.random.Generator) -> CellGraph:
        return mutate(self.space, g, rng)

    def contains(self, g: CellGraph) -> bool:
        return self.space.is_valid(g)


class TableSpace:
    """Finite architecture source: the cells stored in a benchmark table."""

    def __init__(self, table: BenchmarkTable):
        self.table = table
        self.space = table.space
        self._digests = list(table.records)
        self._graphs = table.graphs()

    @property
    def size(self) -> Optional[int]:
        return len(self._graphs)

    def sample(self, rng: np.random.Generator) -> CellGraph:
        return self._graphs[int(rng.integers(len(self._graphs)))]

    def mutate(self, g: CellGraph, rng: np.random.Generator) -> CellGraph:
        """Uniform single-edit neighbor that is stored in the table."""
        options = [n for n in neighbors(self.space, g) if n in self.table]
        if not options:
            raise SamplingError("no single-edit neighbor of the cell is stored in the table")
        return options[int(rng.integers(len(options)))]

    def members(self) -> List[Tuple[str, CellGraph]]:
        """(canonical hash, cell) for every stored architecture."""
        return list(zip(self._digests, self._graphs))

    def contains(self, g: CellGraph) -> bool:
        return g in self.table
