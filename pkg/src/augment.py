"""
Positive-sample generation by edge perturbation and attribute masking.
Every augmented cell carries the exact edit trace that produced it from its origin.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np

from .cellgraph import CellGraph, Edge, GraphFormat, as_oon, canonical_hash, to_json
from .errors import AugmentationError, GraphError


DEFAULT_RATIO_CHOICES = (0.05, 0.1, 0.2, 0.3, 0.4)
MAX_FLIP_RETRIES = 10_000


class AugmentationMethod(str, Enum):
    """Which perturbation produces a positive sample."""

    EDGE_PERTURBATION = "edge_perturbation"
    ATTRIBUTE_MASKING = "attribute_masking"
    MIXED = "mixed"


@dataclass(frozen=True)
class AugmentationSpec:
    """Method, change ratio and number of candidates per origin cell."""

    method: AugmentationMethod = AugmentationMethod.MIXED
    ratio: Optional[float] = None
    candidates: int = 8
    ratio_choices: Tuple[float, ...] = DEFAULT_RATIO_CHOICES

    def __post_init__(self):
        object.__setattr__(self, "method", AugmentationMethod(self.method))
        if self.ratio is not None and not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"augmentation ratio {self.ratio} is outside [0, 1]")
        if self.candidates < 1:
            raise ValueError("augmentation needs at least one candidate")
        if self.ratio is None and not self.ratio_choices:
            raise ValueError("ratio_choices must be non-empty when ratio is unset")
        if any(not 0.0 <= r <= 1.0 for r in self.ratio_choices):
            raise ValueError("every ratio choice must lie in [0, 1]")


@dataclass(frozen=True)
class EdgeAdded:
    i: int
    j: int

    def to_json(self) -> dict:
        return {"edit": "edge_added", "edge": [self.i, self.j]}


@dataclass(frozen=True)
class EdgeRemoved:
    i: int
    j: int

    def to_json(self) -> dict:
        return {"edit": "edge_removed", "edge": [self.i, self.j]}


@dataclass(frozen=True)
class OpChanged:
    node: int
    old: str
    new: str

    def to_json(self) -> dict:
        return {"edit": "op_changed", "node": self.node, "old": self.old, "new": self.new}


EditOp = Union[EdgeAdded, EdgeRemoved, OpChanged]


@dataclass(frozen=True)
class AugmentedGraph:
    """A perturbed cell plus the edits that lead to it from its (OON) origin."""

    graph: CellGraph
    origin: CellGraph
    origin_hash: str
    edits: Tuple[EditOp, ...] = field(default_factory=tuple)

    def to_json(self) -> dict:
        return {"graph": to_json(self.graph), "origin_hash": self.origin_hash,
                "edits": [edit.to_json() for edit in self.edits]}


def apply_edits(origin: CellGraph, edits: Sequence[EditOp]) -> CellGraph:
    """Replay an edit trace; raises GraphError when an edit does not fit the cell."""
    edges = set(origin.edges)
    ops = list(origin.node_ops)
    for edit in edits:
        if isinstance(edit, EdgeAdded):
            if (edit.i, edit.j) in edges:
                raise GraphError(f"edge {edit.i}->{edit.j} is already present")
            edges.add((edit.i, edit.j))
        elif isinstance(edit, EdgeRemoved):
            if (edit.i, edit.j) not in edges:
                raise GraphError(f"edge {edit.i}->{edit.j} is not present")
            edges.remove((edit.i, edit.j))
        else:
            if ops[edit.node] != edit.old:
                raise GraphError(f"node {edit.node} is '{ops[edit.node]}', not '{edit.old}'")
            ops[edit.node] = edit.new
    return CellGraph.oon(ops, edges)


def forced_count(ratio: float, size: int) -> int:
    """ceil(ratio * size), tolerant of float noise such as (1/9) * 9."""
    return int(math.ceil(ratio * size - 1e-9))


def _on_all_paths(node_count: int, edges: FrozenSet[Edge]) -> bool:
    """True when every node lies on an input-output path (edges run forward)."""
    ordered = sorted(edges)
    forward = {0}
    for i, j in ordered:
        if i in forward:
            forward.add(j)
    if len(forward) != node_count:
        return False
    backward = {node_count - 1}
    for i, j in reversed(ordered):
        if j in backward:
            backward.add(i)
    return len(backward) == node_count


def _legal_slots(node_count: int, edges: FrozenSet[Edge], exclude: FrozenSet[Edge]) -> List[Edge]:
    result = []
    for i in range(node_count):
        for j in range(i + 1, node_count):
            slot = (i, j)
            if slot in exclude:
                continue
            flipped = edges - {slot} if slot in edges else edges | {slot}
            if _on_all_paths(node_count, flipped):
                result.append(slot)
    return result


def legal_flips(g: CellGraph, exclude: FrozenSet[Edge] = frozenset()) -> List[Edge]:
    """Forward edge slots whose flip keeps the cell valid."""
    return _legal_slots(g.node_count, frozenset(g.edges), frozenset(exclude))


def flip_sequence_exists(g: CellGraph, steps: int) -> bool:
    """Whether some order of `steps` distinct slot flips keeps every intermediate cell valid.

    The flipped set alone fixes the intermediate cell, so dead sets are remembered.
    """
    n = g.node_count
    edges = frozenset(g.edges)
    dead: set = set()

    def extend(touched: FrozenSet[Edge]) -> bool:
        if len(touched) == steps:
            return True
        for slot in _legal_slots(n, edges ^ touched, touched):
            nxt = touched | {slot}
            if nxt in dead:
                continue
            if extend(nxt):
                return True
            dead.add(nxt)
        return False

    return extend(frozenset())


def _require_oon(g: CellGraph) -> None:
    if g.format is not GraphFormat.OON:
        raise GraphError("augmentation operates on OON cells; convert with to_oon first")


def _continue(current: AugmentedGraph, graph: CellGraph, edits: List[EditOp]) -> AugmentedGraph:
    return AugmentedGraph(graph=graph, origin=current.origin, origin_hash=current.origin_hash,
                          edits=current.edits + tuple(edits))


def _start(g: CellGraph) -> AugmentedGraph:
    return AugmentedGraph(graph=g, origin=g, origin_hash=canonical_hash(g), edits=())


def _draw_flips(g: CellGraph, steps: int, rng: np.random.Generator) -> List[Edge]:
    """Uniform legal flip at each step; a dead end drops that slot and redraws."""
    n = g.node_count
    edges = frozenset(g.edges)
    dead: set = set()
    retries = 0

    def extend(touched: FrozenSet[Edge], order: List[Edge]) -> Optional[List[Edge]]:
        nonlocal retries
        if len(order) == steps:
            return order
        options = _legal_slots(n, edges ^ touched, touched)
        while options:
            slot = options.pop(int(rng.integers(len(options))))
            nxt = touched | {slot}
            if nxt in dead:
                continue
            found = extend(nxt, order + [slot])
            if found is not None:
                return found
            dead.add(nxt)
            retries += 1
            if retries > MAX_FLIP_RETRIES:
                raise AugmentationError(
                    f"no legal sequence of {steps} edge flips after {MAX_FLIP_RETRIES} redraws")
        return None

    order = extend(frozenset(), [])
    if order is None:
        raise AugmentationError(f"no legal sequence of {steps} edge flips exists")
    return order


def _perturb_edges(current: AugmentedGraph, ratio: float, rng: np.random.Generator) -> AugmentedGraph:
    g = current.graph
    steps = forced_count(ratio, len(g.edges))
    edits: List[EditOp] = []
    for slot in _draw_flips(g, steps, rng):
        if slot in g.edges:
            edits.append(EdgeRemoved(*slot))
            g = g.with_edges(g.edges - {slot})
        else:
            edits.append(EdgeAdded(*slot))
            g = g.with_edges(g.edges | {slot})
    return _continue(current, g, edits)


def _mask_attributes(current: AugmentedGraph, ratio: float, vocabulary: Sequence[str],
                     rng: np.random.Generator) -> AugmentedGraph:
    g = current.graph
    interior = g.interior_nodes()
    steps = forced_count(ratio, len(interior))
    if steps == 0:
        return current
    if len(vocabulary) < 2:
        raise AugmentationError("attribute masking needs at least two operations")
    chosen = rng.choice(len(interior), size=steps, replace=False)
    edits: List[EditOp] = []
    for k in sorted(int(c) for c in chosen):
        node = interior[k]
        old = g.node_ops[node]
        options = [op for op in vocabulary if op != old]
        new = options[int(rng.integers(len(options)))]
        edits.append(OpChanged(node, old, new))
        g = g.with_node_op(node, new)
    return _continue(current, g, edits)


def edge_perturbation(g: CellGraph, ratio: float, rng: np.random.Generator) -> AugmentedGraph:
    """Flip ceil(ratio * |edges|) distinct edge slots, each uniform among valid flips."""
    _require_oon(g)
    return _perturb_edges(_start(g), ratio, rng)


def attribute_masking(g: CellGraph, ratio: float, vocabulary: Sequence[str],
                      rng: np.random.Generator) -> AugmentedGraph:
    """Relabel ceil(ratio * interior) interior nodes to a different operation."""
    _require_oon(g)
    return _mask_attributes(_start(g), ratio, vocabulary, rng)


def augment_once(g: CellGraph, spec: AugmentationSpec, ratio: float, vocabulary: Sequence[str],
                 rng: np.random.Generator) -> AugmentedGraph:
    """One augmentation of an OON cell with the spec's method."""
    current = _start(g)
    if spec.method in (AugmentationMethod.EDGE_PERTURBATION, AugmentationMethod.MIXED):
        current = _perturb_edges(current, ratio, rng)
    if spec.method in (AugmentationMethod.ATTRIBUTE_MASKING, AugmentationMethod.MIXED):
        current = _mask_attributes(current, ratio, vocabulary, rng)
    return current


def generate_candidates(g: CellGraph, spec: AugmentationSpec, vocabulary: Sequence[str],
                        rng: np.random.Generator) -> List[AugmentedGraph]:
    """spec.candidates independent augmentations of g (OOE cells are converted first)."""
    origin = as_oon(g)
    candidates = []
    for _ in range(spec.candidates):
        if spec.ratio is not None:
            ratio = spec.ratio
        else:
            ratio = float(spec.ratio_choices[int(rng.integers(len(spec.ratio_choices)))])
        candidates.append(augment_once(origin, spec, ratio, vocabulary, rng))
    return candidates


def augmentable(g: CellGraph, spec: AugmentationSpec) -> bool:
    """Whether every ratio the spec can draw leaves a legal edit sequence for g.

    The largest forced count decides: prefixes of a legal sequence are legal too.
    """
    origin = as_oon(g)
    if spec.method is AugmentationMethod.ATTRIBUTE_MASKING:
        return True
    ratios = [spec.ratio] if spec.ratio is not None else list(spec.ratio_choices)
    steps = max(forced_count(r, len(origin.edges)) for r in ratios)
    if steps == 0:
        return True
    return flip_sequence_exists(origin, steps)
