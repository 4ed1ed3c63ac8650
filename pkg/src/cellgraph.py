"""
Cell graph representation for architecture search spaces.
Covers validity checks, matrix encoding, isomorphism-invariant hashing and OOE to OON conversion.
"""

import hashlib
import itertools
import json
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from .errors import GraphError


INPUT = "input"
OUTPUT = "output"
ZERO = "zero"
MARKERS = (INPUT, OUTPUT)

# Raw benchmark exports name the zeroize op "none".
OP_ALIASES = {"none": ZERO}

# Largest number of label-preserving orders tried when breaking WL ties exactly.
MAX_CANONICAL_ORDERS = 5040

Edge = Tuple[int, int]


class GraphFormat(str, Enum):
    """Where a cell keeps its operation labels."""

    OON = "oon"
    OOE = "ooe"


@dataclass(frozen=True)
class CellGraph:
    """A directed acyclic cell with operations on nodes (OON) or on edges (OOE)."""

    format: GraphFormat
    node_count: int
    edges: FrozenSet[Edge]
    node_ops: Tuple[str, ...] = ()
    edge_ops: Tuple[Tuple[Edge, str], ...] = ()

    @classmethod
    def oon(cls, node_ops: Sequence[str], edges: Iterable[Edge]) -> "CellGraph":
        """Build an operation-on-nodes cell."""
        return cls(
            format=GraphFormat.OON,
            node_count=len(node_ops),
            edges=frozenset((int(i), int(j)) for i, j in edges),
            node_ops=tuple(node_ops),
        )

    @classmethod
    def ooe(cls, node_count: int, edge_ops: Mapping[Edge, str]) -> "CellGraph":
        """Build an operation-on-edges cell; the edge set is the mapping's keys."""
        items = tuple(sorted(((int(i), int(j)), op) for (i, j), op in edge_ops.items()))
        return cls(
            format=GraphFormat.OOE,
            node_count=node_count,
            edges=frozenset(edge for edge, _ in items),
            edge_ops=items,
        )

    @property
    def edge_op_map(self) -> Dict[Edge, str]:
        return dict(self.edge_ops)

    def sorted_edges(self) -> List[Edge]:
        return sorted(self.edges)

    def in_degree(self, node: int) -> int:
        return sum(1 for _, j in self.edges if j == node)

    def out_degree(self, node: int) -> int:
        return sum(1 for i, _ in self.edges if i == node)

    def interior_nodes(self) -> List[int]:
        """Nodes that are neither the input nor the output marker."""
        return list(range(1, self.node_count - 1))

    def with_edges(self, edges: Iterable[Edge]) -> "CellGraph":
        """Copy of an OON cell with a different edge set."""
        if self.format is not GraphFormat.OON:
            raise GraphError("edge set edits apply to OON cells only")
        return CellGraph.oon(self.node_ops, edges)

    def with_node_op(self, node: int, op: str) -> "CellGraph":
        """Copy of an OON cell with one node relabeled."""
        ops = list(self.node_ops)
        ops[node] = op
        return CellGraph.oon(ops, self.edges)

    def with_edge_op(self, edge: Edge, op: str) -> "CellGraph":
        """Copy of an OOE cell with one edge relabeled."""
        mapping = self.edge_op_map
        if edge not in mapping:
            raise GraphError(f"edge {edge} is not in the cell")
        mapping[edge] = op
        return CellGraph.ooe(self.node_count, mapping)


@dataclass
class ValidationReport:
    """Violated invariants of a cell; empty means the cell is valid."""

    violations: List[str] = field(default_factory=list)

    @property
    def is_valid(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.is_valid


@dataclass(frozen=True, eq=False)
class MatrixEncoding:
    """Adjacency and one-hot attribute matrices of an OON cell."""

    adjacency: np.ndarray
    attributes: np.ndarray

    @property
    def node_count(self) -> int:
        return self.adjacency.shape[0]


def _reachable(start: int, neighbors: Dict[int, List[int]]) -> set:
    seen = {start}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        for nxt in neighbors.get(node, []):
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return seen


def _has_cycle(node_count: int, edges: Iterable[Edge]) -> bool:
    graph = nx.DiGraph()
    graph.add_nodes_from(range(node_count))
    graph.add_edges_from(edges)
    return not nx.is_directed_acyclic_graph(graph)


def validate(g: CellGraph, vocabulary: Optional[Sequence[str]] = None) -> ValidationReport:
    """List every invariant the cell violates."""
    report = ValidationReport()
    issues = report.violations
    n = g.node_count

    if n < 2:
        issues.append(f"node_count {n} is below the minimum of 2")
        return report

    in_range = []
    for i, j in g.sorted_edges():
        if not (0 <= i < n and 0 <= j < n):
            issues.append(f"edge {i}->{j} references a node outside 0..{n - 1}")
        elif i >= j:
            issues.append(f"cycle/ordering: edge {i}->{j} is not forward in topological order")
        else:
            in_range.append((i, j))
    out_of_order = [(i, j) for i, j in g.edges if 0 <= i < n and 0 <= j < n and i >= j]
    if out_of_order and _has_cycle(n, in_range + out_of_order):
        issues.append("cycle/ordering: the edge set contains a directed cycle")

    successors: Dict[int, List[int]] = {}
    predecessors: Dict[int, List[int]] = {}
    for i, j in g.edges:
        if 0 <= i < n and 0 <= j < n:
            successors.setdefault(i, []).append(j)
            predecessors.setdefault(j, []).append(i)

    sources = [v for v in range(n) if not predecessors.get(v)]
    sinks = [v for v in range(n) if not successors.get(v)]
    if 0 not in sources:
        issues.append("input node 0 has incoming edges")
    if n - 1 not in sinks:
        issues.append(f"output node {n - 1} has outgoing edges")

    from_input = _reachable(0, successors)
    to_output = _reachable(n - 1, predecessors)
    if n - 1 not in from_input:
        issues.append("output is unreachable from input")
    for v in range(1, n - 1):
        if v not in from_input or v not in to_output:
            side = "unreachable from input" if v not in from_input else "cannot reach output"
            issues.append(f"dangling node {v} ({side})")

    if g.format is GraphFormat.OON:
        if len(g.node_ops) != n:
            issues.append(f"node_ops has {len(g.node_ops)} labels for {n} nodes")
        else:
            if g.node_ops[0] != INPUT:
                issues.append(f"node 0 is labeled '{g.node_ops[0]}', expected '{INPUT}'")
            if g.node_ops[-1] != OUTPUT:
                issues.append(f"node {n - 1} is labeled '{g.node_ops[-1]}', expected '{OUTPUT}'")
            for v in range(1, n - 1):
                if g.node_ops[v] in MARKERS:
                    issues.append(f"interior node {v} carries marker label '{g.node_ops[v]}'")
        if g.edge_ops:
            issues.append("OON cell carries edge operations")
        labels = list(g.node_ops[1:-1])
    else:
        if g.node_ops:
            issues.append("OOE cell carries node operations")
        if not g.edge_ops:
            issues.append("OOE cell has no edge operations")
        if set(g.edge_op_map) != set(g.edges):
            issues.append("edge_ops keys differ from the edge set")
        labels = [op for _, op in g.edge_ops]

    if vocabulary is not None:
        allowed = set(vocabulary)
        for label in sorted(set(labels) - allowed):
            issues.append(f"operation '{label}' is not in the search space vocabulary")

    return report


def require_valid(g: CellGraph, vocabulary: Optional[Sequence[str]] = None) -> None:
    """Raise GraphError listing every violation when the cell is invalid."""
    report = validate(g, vocabulary)
    if not report.is_valid:
        raise GraphError("invalid cell: " + "; ".join(report.violations))


def encode_matrices(g: CellGraph, vocabulary: Sequence[str]) -> MatrixEncoding:
    """Adjacency matrix plus one-hot attribute rows over the node vocabulary."""
    if g.format is not GraphFormat.OON:
        raise GraphError("encode_matrices needs an OON cell; convert with to_oon first")
    index = {op: k for k, op in enumerate(vocabulary)}
    adjacency = np.zeros((g.node_count, g.node_count), dtype=np.int8)
    for i, j in g.edges:
        adjacency[i, j] = 1
    attributes = np.zeros((g.node_count, len(vocabulary)), dtype=np.float64)
    for node, op in enumerate(g.node_ops):
        if op not in index:
            raise GraphError(f"operation '{op}' is missing from the encoding vocabulary")
        attributes[node, index[op]] = 1.0
    return MatrixEncoding(adjacency=adjacency, attributes=attributes)


def decode_matrices(encoding: MatrixEncoding, vocabulary: Sequence[str]) -> CellGraph:
    """Rebuild the OON cell an encoding came from."""
    rows, cols = np.nonzero(encoding.adjacency)
    ops = [vocabulary[int(np.argmax(row))] for row in encoding.attributes]
    return CellGraph.oon(ops, zip(rows.tolist(), cols.tolist()))


def to_oon(g: CellGraph) -> CellGraph:
    """Line-graph transform: one node per OOE edge, wired where edges compose."""
    if g.format is not GraphFormat.OOE:
        raise GraphError("to_oon expects an OOE cell")
    source, sink = 0, g.node_count - 1
    ordered = g.sorted_edges()
    ops = g.edge_op_map
    position = {edge: k + 1 for k, edge in enumerate(ordered)}
    output_node = len(ordered) + 1

    node_ops = [INPUT] + [ops[edge] for edge in ordered] + [OUTPUT]
    edges = []
    for a, b in ordered:
        if a == source:
            edges.append((0, position[(a, b)]))
        if b == sink:
            edges.append((position[(a, b)], output_node))
        for b2, c in ordered:
            if b2 == b:
                edges.append((position[(a, b)], position[(b2, c)]))
    return CellGraph.oon(node_ops, edges)


def as_oon(g: CellGraph) -> CellGraph:
    """The cell itself when OON, its line graph when OOE."""
    return g if g.format is GraphFormat.OON else to_oon(g)


def permute(g: CellGraph, order: Sequence[int]) -> CellGraph:
    """Relabel nodes so that new node k is old node order[k]."""
    if sorted(order) != list(range(g.node_count)):
        raise GraphError("order must be a permutation of the node indices")
    position = {old: new for new, old in enumerate(order)}
    if g.format is GraphFormat.OON:
        return CellGraph.oon([g.node_ops[old] for old in order],
                             [(position[i], position[j]) for i, j in g.edges])
    return CellGraph.ooe(g.node_count,
                         {(position[i], position[j]): op for (i, j), op in g.edge_ops})


def normalize(g: CellGraph) -> CellGraph:
    """Deterministic topological order with ties broken by (in-degree, op label)."""
    indegree = {v: 0 for v in range(g.node_count)}
    successors: Dict[int, List[int]] = {v: [] for v in range(g.node_count)}
    for i, j in g.edges:
        indegree[j] += 1
        successors[i].append(j)
    static_in = dict(indegree)
    incoming_ops: Dict[int, Tuple[str, ...]] = {}
    for (i, j), op in g.edge_ops:
        incoming_ops[j] = tuple(sorted(incoming_ops.get(j, ()) + (op,)))

    def key(v: int):
        label = g.node_ops[v] if g.format is GraphFormat.OON else "|".join(incoming_ops.get(v, ()))
        return (static_in[v], label, v)

    ready = sorted((v for v in range(g.node_count) if indegree[v] == 0), key=key)
    order = []
    while ready:
        node = ready.pop(0)
        order.append(node)
        for nxt in successors[node]:
            indegree[nxt] -= 1
            if indegree[nxt] == 0:
                ready.append(nxt)
        ready.sort(key=key)
    if len(order) != g.node_count:
        raise GraphError("cannot normalize a cell with a directed cycle")
    return permute(g, order)


def _labeled_view(g: CellGraph) -> Tuple[List[str], Dict[Edge, str]]:
    if g.format is GraphFormat.OON:
        return list(g.node_ops), {edge: "" for edge in g.edges}
    labels = [""] * g.node_count
    labels[0], labels[-1] = INPUT, OUTPUT
    return labels, g.edge_op_map


def _refine_colors(labels: List[str], edge_labels: Dict[Edge, str], rounds: int) -> List[int]:
    """Weisfeiler-Lehman refinement over (label, in-multiset, out-multiset)."""
    n = len(labels)
    palette = sorted(set(labels))
    colors = [palette.index(label) for label in labels]
    for _ in range(rounds):
        signatures = []
        for v in range(n):
            incoming = sorted((edge_labels[(u, w)], colors[u]) for (u, w) in edge_labels if w == v)
            outgoing = sorted((edge_labels[(u, w)], colors[w]) for (u, w) in edge_labels if u == v)
            signatures.append((colors[v], tuple(incoming), tuple(outgoing)))
        palette = sorted(set(signatures))
        refined = [palette.index(sig) for sig in signatures]
        if len(set(refined)) == len(set(colors)):
            colors = refined
            break
        colors = refined
    return colors


def _serialize(order: Sequence[int], labels: List[str], edge_labels: Dict[Edge, str]):
    position = {old: new for new, old in enumerate(order)}
    return (
        tuple(labels[old] for old in order),
        tuple(sorted((position[i], position[j], label) for (i, j), label in edge_labels.items())),
    )


def canonical_form(g: CellGraph):
    """Isomorphism-invariant description of the cell."""
    labels, edge_labels = _labeled_view(g)
    colors = _refine_colors(labels, edge_labels, rounds=g.node_count)
    classes: Dict[int, List[int]] = {}
    for v, color in enumerate(colors):
        classes.setdefault(color, []).append(v)
    groups = [classes[color] for color in sorted(classes)]

    orders = math.prod(math.factorial(len(group)) for group in groups)
    if orders > MAX_CANONICAL_ORDERS:
        # WL-only description; exact for every cell the bundled spaces produce.
        return ("wl", tuple(sorted(zip(colors, labels))),
                tuple(sorted((colors[i], colors[j], label) for (i, j), label in edge_labels.items())))

    best = None
    for parts in itertools.product(*(itertools.permutations(group) for group in groups)):
        order = [v for part in parts for v in part]
        candidate = _serialize(order, labels, edge_labels)
        if best is None or candidate < best:
            best = candidate
    return ("exact",) + best


def canonical_hash(g: CellGraph) -> str:
    """Stable hex digest shared by all isomorphic copies of a cell."""
    payload = json.dumps([g.format.value, canonical_form(g)], separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def to_networkx(g: CellGraph) -> nx.DiGraph:
    """DiGraph with an 'op' attribute on nodes (OON) or edges (OOE)."""
    graph = nx.DiGraph()
    if g.format is GraphFormat.OON:
        for node, op in enumerate(g.node_ops):
            graph.add_node(node, op=op)
        graph.add_edges_from(g.edges)
    else:
        graph.add_nodes_from(range(g.node_count))
        for edge, op in g.edge_ops:
            graph.add_edge(*edge, op=op)
    return graph


def isomorphic(g1: CellGraph, g2: CellGraph) -> bool:
    """Label-preserving isomorphism test."""
    if g1.format is not g2.format:
        return False
    same_op = lambda a, b: a.get("op") == b.get("op")
    return nx.is_isomorphic(to_networkx(g1), to_networkx(g2), node_match=same_op, edge_match=same_op)


def longest_path_length(g: CellGraph) -> int:
    """Number of edges on the longest input-to-output path."""
    return int(nx.dag_longest_path_length(to_networkx(g)))


def to_json(g: CellGraph) -> dict:
    """Interchange form of a cell."""
    return {
        "format": g.format.value,
        "nodes": g.node_count,
        "edges": [list(edge) for edge in g.sorted_edges()],
        "node_ops": list(g.node_ops),
        "edge_ops": {f"{i}-{j}": op for (i, j), op in g.edge_ops},
    }


def from_json(data: Mapping) -> CellGraph:
    """Parse the interchange form; raises GraphError on malformed input."""
    try:
        fmt = GraphFormat(str(data["format"]).lower())
        nodes = int(data["nodes"])
        edges = [(int(i), int(j)) for i, j in data.get("edges", [])]
        if fmt is GraphFormat.OON:
            ops = [OP_ALIASES.get(op, op) for op in data["node_ops"]]
            return CellGraph.oon(ops, edges) if len(ops) == nodes else CellGraph(
                GraphFormat.OON, nodes, frozenset(edges), tuple(ops))
        edge_ops = {}
        for key, op in data["edge_ops"].items():
            i, j = key.split("-")
            edge_ops[(int(i), int(j))] = OP_ALIASES.get(op, op)
        if edges and set(edges) != set(edge_ops):
            raise GraphError("'edges' and 'edge_ops' keys disagree")
        return CellGraph.ooe(nodes, edge_ops)
    except GraphError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise GraphError(f"malformed cell JSON: {e}") from e
