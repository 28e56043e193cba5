"""Per-layer similarity graphs, closeness centrality, and filter selection.

Edges join filter pairs whose averaged similarity clears a per-layer
threshold.  Central filters are chosen greedily: the node with the highest
closeness centrality on the *residual* graph is kept, its remaining
neighbors are assigned to it and pruned, and the process repeats.  A
threshold search turns a compression rate into a threshold with an exact
keep count.

Closeness here uses distances d = 1 - |S| in the denominator (a node close
to its neighbors scores high).  The inverted variant that divides by the
sum of similarities instead is available as formula="literal" for
comparison; it ranks the most redundant filter lowest and is not the
default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .similarity import SimilarityMatrix

DISTANCE_EPS = 1e-8

# Sentinel central index for dead (zero-variance) channels, which are
# removed by constant folding rather than kernel accumulation.
DROP = -1


@dataclass
class SimilarityGraph:
    layer_id: str
    n: int
    adjacency: list[frozenset[int]]
    theta: float
    matrix: SimilarityMatrix

    def neighbors(self, j: int) -> frozenset[int]:
        return self.adjacency[j]

    def edge_count(self) -> int:
        return sum(len(a) for a in self.adjacency) // 2


@dataclass
class CentralAssignment:
    """Outcome of selecting central filters for one layer.

    centrals lists kept filter indices in selection order; assignment maps
    every pruned index to its central (DROP for dead channels); signs carry
    the similarity sign used when kernels are folded; scores record each
    node's closeness on the residual graph at the round it was resolved.
    """

    layer_id: str
    centrals: list[int]
    assignment: dict[int, int]
    signs: dict[int, int] = field(default_factory=dict)
    scores: dict[int, float] = field(default_factory=dict)
    theta: float = 1.0

    @property
    def pruned(self) -> list[int]:
        return sorted(self.assignment)

    @property
    def keep(self) -> list[int]:
        return sorted(self.centrals)

    def surrogate_cost(self, S: SimilarityMatrix) -> float:
        """Sum of (1 - |S[pruned][central]|) over non-dead assignments."""
        cost = 0.0
        for x, j in self.assignment.items():
            if j != DROP:
                cost += 1.0 - abs(float(S.matrix[x, j]))
        return cost


def build_graph(S: SimilarityMatrix, theta: float, edge_mode: str = "positive") -> SimilarityGraph:
    """Undirected graph over filters with edges where similarity >= theta.

    edge_mode "positive" (the default) compares signed S;
    "absolute" compares |S| so strongly anti-correlated maps also connect.
    Dead channels are always isolated.
    """
    if not (0.0 < theta <= 1.0):
        raise ConfigError(f"theta must be in (0, 1], got {theta}")
    if edge_mode not in ("positive", "absolute"):
        raise ConfigError(f"unknown edge_mode {edge_mode!r}")
    values = S.matrix if edge_mode == "positive" else np.abs(S.matrix)
    n = S.n
    adjacency = []
    for j in range(n):
        if j in S.dead_channels:
            adjacency.append(frozenset())
            continue
        row = values[j]
        nbrs = {int(o) for o in np.nonzero(row >= theta)[0]
                if o != j and o not in S.dead_channels}
        adjacency.append(frozenset(nbrs))
    return SimilarityGraph(S.layer_id, n, adjacency, float(theta), S)


def closeness(graph: SimilarityGraph, S: SimilarityMatrix, j: int,
              formula: str = "distance", restrict=None) -> float:
    """Closeness centrality of node j within its neighborhood.

    With k neighbors at distances d = 1 - |S| (floored at 1e-8), the score
    is k / sum(d).  Isolated nodes score 0.  `restrict` optionally limits
    the neighborhood to a residual node set.
    """
    if not (0 <= j < graph.n):
        raise ConfigError(f"unknown node {j}")
    nbrs = graph.adjacency[j]
    if restrict is not None:
        nbrs = nbrs & restrict
    if not nbrs:
        return 0.0
    if formula == "distance":
        total = sum(max(1.0 - abs(float(S.matrix[j, o])), DISTANCE_EPS) for o in nbrs)
    elif formula == "literal":
        total = max(sum(abs(float(S.matrix[j, o])) for o in nbrs), DISTANCE_EPS)
    else:
        raise ConfigError(f"unknown closeness formula {formula!r}")
    return len(nbrs) / total


def select_central_filters(S: SimilarityMatrix, graph: SimilarityGraph,
                           pick: str = "highest", formula: str = "distance") -> CentralAssignment:
    """Greedy residual selection of central filters.

    Each round recomputes closeness over the unresolved nodes, keeps the
    best-scoring node (ties -> lower index), and assigns its unresolved
    neighbors to it.  Isolated live nodes become centrals that replace only
    themselves; dead channels are pruned unconditionally.  pick="lowest"
    inverts the ranking (the "reverse" ablation strategy).
    """
    if pick not in ("highest", "lowest"):
        raise ConfigError(f"unknown pick order {pick!r}")
    n = graph.n
    assignment: dict[int, int] = {}
    signs: dict[int, int] = {}
    scores: dict[int, float] = {}
    for d in sorted(S.dead_channels):
        assignment[d] = DROP
        scores[d] = 0.0
    unresolved = set(range(n)) - set(S.dead_channels)
    centrals: list[int] = []
    better = (lambda a, b: a > b) if pick == "highest" else (lambda a, b: a < b)
    while unresolved:
        frozen = frozenset(unresolved)
        best, best_score = None, None
        for j in sorted(unresolved):
            score = closeness(graph, S, j, formula=formula, restrict=frozen)
            if best is None or better(score, best_score):
                best, best_score = j, score
        centrals.append(best)
        scores[best] = best_score
        unresolved.discard(best)
        for x in sorted(graph.adjacency[best] & unresolved):
            assignment[x] = best
            signs[x] = 1 if S.matrix[x, best] >= 0 else -1
            scores[x] = closeness(graph, S, x, formula=formula, restrict=frozen)
            unresolved.discard(x)
    return CentralAssignment(S.layer_id, centrals, assignment, signs, scores, graph.theta)


def keep_count_for_rate(n: int, lam: float) -> int:
    return math.ceil((1.0 - lam) * n)


def threshold_for_rate(S: SimilarityMatrix, lam: float, edge_mode: str = "positive",
                       selector=None) -> tuple[float, CentralAssignment]:
    """Find the largest threshold whose selection keeps at most the budget,
    then trim to an exact keep count of ceil((1 - lam) * n).

    The search walks the sorted distinct off-diagonal |S| values (binary
    search; the keep count grows with theta).  If the chosen threshold
    keeps too few filters, pruned filters are promoted back, lowest
    centrality first (dead channels only as a last resort).
    """
    if not (0.0 <= lam < 1.0):
        raise ConfigError(f"compression rate must be in [0, 1), got {lam}")
    n = S.n
    target = keep_count_for_rate(n, lam)
    if target < 1:
        raise ConfigError(f"rate {lam} keeps no filters of {n}")
    if selector is None:
        selector = select_central_filters

    iu = np.triu_indices(n, k=1)
    offdiag = np.abs(S.matrix[iu])
    candidates = sorted({float(v) for v in offdiag if 0.0 < v <= 1.0})
    if not candidates or candidates[-1] < 1.0:
        # a threshold above every similarity yields the edgeless graph
        candidates.append(min(1.0, float(np.nextafter(candidates[-1], 2.0)) if candidates else 1.0))

    def run(theta):
        return selector(S, build_graph(S, theta, edge_mode))

    # rightmost candidate whose keep count fits the budget
    lo, hi, chosen = 0, len(candidates) - 1, None
    while lo <= hi:
        mid = (lo + hi) // 2
        result = run(candidates[mid])
        if len(result.centrals) <= target:
            chosen = (candidates[mid], result)
            lo = mid + 1
        else:
            hi = mid - 1
    if chosen is None:
        # even the densest graph keeps too many: merge surplus centrals
        theta = candidates[0]
        result = run(theta)
        _demote_to_target(result, S, target)
        return theta, result

    theta, result = chosen
    _promote_to_target(result, S, target)
    return theta, result


def _promote_to_target(result: CentralAssignment, S: SimilarityMatrix, target: int):
    """Promote pruned filters back to centrals until the keep count is exact.

    Lowest resolution-round centrality first (ties by index): dead channels
    score 0 and so return first, which preserves well-represented prunes
    (perfect duplicates especially) over zero-information constants.
    """
    if len(result.centrals) >= target:
        return
    order = sorted(result.assignment, key=lambda x: (result.scores.get(x, 0.0), x))
    for x in order:
        if len(result.centrals) == target:
            break
        del result.assignment[x]
        result.signs.pop(x, None)
        result.centrals.append(x)


def _demote_to_target(result: CentralAssignment, S: SimilarityMatrix, target: int):
    """Reassign surplus centrals to their most-similar peer (corner case:
    exact-zero similarities partition the densest graph)."""
    while len(result.centrals) > target:
        best = None
        for c in result.centrals:
            for other in result.centrals:
                if other == c:
                    continue
                s = abs(float(S.matrix[c, other]))
                if best is None or s > best[0]:
                    best = (s, c, other)
        _, c, other = best
        result.centrals.remove(c)
        result.assignment[c] = other
        result.signs[c] = 1 if S.matrix[c, other] >= 0 else -1
        for x, central in list(result.assignment.items()):
            if central == c:
                result.assignment[x] = other
                result.signs[x] = 1 if S.matrix[x, other] >= 0 else -1
