"""
Contrastive difficulty of a positive sample as size-normalized edit distance to its origin.
"""

import itertools
from dataclasses import dataclass

from .augment import AugmentedGraph
from .cellgraph import CellGraph, GraphFormat
from .errors import DegenerateGraphError, GraphError, SizeBoundError


# Exhaustive node-correspondence search is limited to cells this small.
GED_MAX_NODES = 6


@dataclass(frozen=True)
class DifficultyScore:
    """ld / (|G| * |G_hat|) with the edge counts it was computed from."""

    value: float
    ld: int
    size_g: int
    size_g_hat: int


def edit_difficulty(a: AugmentedGraph) -> DifficultyScore:
    """Edit-trace length normalized by the edge counts of origin and augmentation."""
    size_g = len(a.origin.edges)
    size_g_hat = len(a.graph.edges)
    if size_g == 0 or size_g_hat == 0:
        raise DegenerateGraphError(
            f"degenerate graph: edge counts {size_g} and {size_g_hat} cannot be normalized")
    ld = len(a.edits)
    return DifficultyScore(value=ld / (size_g * size_g_hat), ld=ld, size_g=size_g, size_g_hat=size_g_hat)


def _mapping_cost(g1: CellGraph, g2: CellGraph, mapping) -> int:
    if g1.format is GraphFormat.OON:
        relabels = sum(1 for v in range(g1.node_count) if g1.node_ops[v] != g2.node_ops[mapping[v]])
        mapped = {(mapping[i], mapping[j]) for i, j in g1.edges}
        return relabels + len(mapped ^ g2.edges)
    ops2 = g2.edge_op_map
    cost = 0
    mapped = {}
    for (i, j), op in g1.edge_ops:
        mapped[(mapping[i], mapping[j])] = op
    for edge in set(mapped) | set(ops2):
        if edge not in mapped or edge not in ops2 or mapped[edge] != ops2[edge]:
            cost += 1
    return cost


def ged_bruteforce(g1: CellGraph, g2: CellGraph) -> int:
    """Fewest edge add/remove and op relabel edits turning g1 into a copy of g2."""
    if g1.format is not g2.format:
        raise GraphError("graph edit distance needs two cells of the same format")
    if max(g1.node_count, g2.node_count) > GED_MAX_NODES:
        raise SizeBoundError(
            f"exhaustive edit distance is limited to {GED_MAX_NODES} nodes, "
            f"got {g1.node_count} and {g2.node_count}")
    if g1.node_count != g2.node_count:
        raise GraphError("elementary edits keep the node count, so the cells are not comparable")

    n = g1.node_count
    best = None
    # Input and output markers map onto each other; interior nodes permute freely.
    for interior in itertools.permutations(range(1, n - 1)):
        mapping = (0,) + interior + (n - 1,)
        cost = _mapping_cost(g1, g2, mapping)
        if best is None or cost < best:
            best = cost
            if best == 0:
                break
    return best
