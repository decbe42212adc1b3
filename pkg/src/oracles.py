"""Exact combinatorial oracles: Hamiltonicity, exact TSP and optimal-tour counts."""

import logging
import math
import time

import networkx as nx

from .errors import OracleError, OracleTimeoutError
from .models import (
    HamiltonianDecision,
    HamiltonianStatus,
    HcpInstance,
    TourCount,
    TourResult,
    TspInstance,
)

logger = logging.getLogger(__name__)

DEFAULT_BUDGET_SECONDS = 300.0
DP_MAX_NODES = 25
HCP_MAX_NODES = 64
_CHECK_EVERY = 2048

HELD_KARP = "held-karp"
BRANCH_AND_BOUND = "branch-and-bound"


class _Deadline:
    """Cheap periodic wall-clock check."""

    def __init__(self, budget: float, what: str):
        self.start = time.monotonic()
        self.limit = self.start + budget
        self.what = what
        self.ticks = 0

    @property
    def elapsed(self) -> float:
        return time.monotonic() - self.start

    def expired(self) -> bool:
        self.ticks += 1
        return (self.ticks & (_CHECK_EVERY - 1)) == 0 and time.monotonic() > self.limit

    def check(self, incumbent: TourResult | None = None) -> None:
        if self.expired():
            raise OracleTimeoutError(
                f"{self.what} exceeded its budget after {self.elapsed:.1f}s",
                elapsed=self.elapsed,
                incumbent=incumbent,
            )


class _InArcBound:
    """Admissible completion bound for a partial tour origin -> ... -> last.

    Every unvisited node and the origin still need one incoming arc from
    ``last`` or another unvisited node; the bound sums the cheapest such arc.
    Nodes other than the origin are bit positions 0..m-1.
    """

    def __init__(self, cost: list[list[int]], others: list[int], origin: int):
        self.full = (1 << len(others)) - 1
        self._levels = [self._levels_into(cost, others, w) for w in others]
        self._origin_levels = self._levels_into(cost, others, origin)

    @staticmethod
    def _levels_into(
        cost: list[list[int]], others: list[int], w: int
    ) -> list[tuple[int, int]]:
        by_cost: dict[int, int] = {}
        for bit, u in enumerate(others):
            if u != w:
                by_cost[cost[u][w]] = by_cost.get(cost[u][w], 0) | (1 << bit)
        return sorted(by_cost.items())

    @staticmethod
    def _cheapest(levels: list[tuple[int, int]], avail: int) -> float:
        for c, preds in levels:
            if avail & preds:
                return c
        return math.inf

    def __call__(self, mask: int, last: int) -> float:
        rest = self.full & ~mask
        avail = rest | (1 << last)
        total = self._cheapest(self._origin_levels, avail)
        while rest:
            low = rest & -rest
            total += self._cheapest(self._levels[low.bit_length() - 1], avail & ~low)
            rest ^= low
        return total


def _matrix(t: TspInstance, transpose: bool = False) -> list[list[int]]:
    """0-padded 1-based cost matrix."""
    m = [[0] * (t.n + 1)] + [[0, *row] for row in t.cost]
    if transpose:
        m = [list(col) for col in zip(*m, strict=True)]
    return m


def cheapest_out_sum(t: TspInstance) -> int:
    """Sum over nodes of the cheapest outgoing arc; a bound no tour beats."""
    return sum(min(t.cost_of(i, j) for j in t.nodes if j != i) for i in t.nodes)


def _held_karp_pass(
    t: TspInstance,
    upper: float,
    deadline: _Deadline,
) -> tuple[int | None, int, list[int] | None, float]:
    """One layered DP pass keeping only states with g + bound <= upper.

    Returns (optimum or None, number of optimal tours, one optimal order,
    smallest pruned f-value).
    """
    cost = _matrix(t)
    origin = t.origin
    others = [v for v in t.nodes if v != origin]
    bound = _InArcBound(cost, others, origin)
    full = bound.full
    next_upper = math.inf

    # state (mask, last bit) -> [g, count, parent bit]
    layer: dict[tuple[int, int], list[int]] = {}
    for b, v in enumerate(others):
        g = cost[origin][v]
        f = g + bound(1 << b, b)
        if f <= upper:
            layer[(1 << b, b)] = [g, 1, -1]
        else:
            next_upper = min(next_upper, f)
    history = [layer]

    for _ in range(len(others) - 1):
        nxt: dict[tuple[int, int], list[int]] = {}
        pruned: dict[tuple[int, int], float] = {}
        for (mask, last), (g, count, _) in layer.items():
            deadline.check()
            row = cost[others[last]]
            rest = full & ~mask
            while rest:
                low = rest & -rest
                rest ^= low
                w = low.bit_length() - 1
                g2 = g + row[others[w]]
                key = (mask | low, w)
                entry = nxt.get(key)
                if entry is not None:
                    if g2 < entry[0]:
                        entry[0], entry[1], entry[2] = g2, count, last
                    elif g2 == entry[0]:
                        entry[1] += count
                    continue
                h = pruned.get(key)
                if h is None:
                    h = bound(mask | low, w)
                f = g2 + h
                if f > upper:
                    pruned[key] = h
                    next_upper = min(next_upper, f)
                    continue
                nxt[key] = [g2, count, last]
        layer = nxt
        history.append(layer)

    best: int | None = None
    total = 0
    best_last = -1
    for (mask, last), (g, count, _) in layer.items():
        if mask != full:
            continue
        value = g + cost[others[last]][origin]
        if best is None or value < best:
            best, total, best_last = value, count, last
        elif value == best:
            total += count
    if best is None:
        return None, 0, None, next_upper

    order = []
    mask, last = full, best_last
    for depth in range(len(history) - 1, -1, -1):
        order.append(others[last])
        parent = history[depth][(mask, last)][2]
        mask ^= 1 << last
        last = parent
    order.append(origin)
    order.reverse()
    return best, total, order, next_upper


def held_karp(
    t: TspInstance,
    budget: float = DEFAULT_BUDGET_SECONDS,
    upper: float | None = None,
) -> tuple[int, int, list[int]]:
    """Exact optimum, its multiplicity and one optimal order.

    Runs bounded DP passes with a rising upper bound (the smallest pruned
    f-value of the previous pass) until a tour fits; the first fitting pass
    is exact because the bound never overestimates.
    """
    if t.n < 3:
        raise OracleError("TSP oracles need at least 3 nodes")
    deadline = _Deadline(budget, "Held-Karp")
    limit = upper if upper is not None else 0
    while True:
        best, count, order, next_upper = _held_karp_pass(t, limit, deadline)
        if best is not None and order is not None:
            logger.info(f"Held-Karp closed at {best} with {count} optimal tours")
            return best, count, order
        if upper is not None or next_upper == math.inf:
            raise OracleError(f"No tour within upper bound {limit}")
        logger.debug(f"Held-Karp contour {limit} empty; raising to {next_upper}")
        limit = next_upper


def branch_and_bound(t: TspInstance, budget: float = DEFAULT_BUDGET_SECONDS) -> TourResult:
    """Depth-first branch-and-bound with the in-arc completion bound.

    The search stops early once a tour reaches the cheapest-out sum.
    """
    if t.n < 3:
        raise OracleError("TSP oracles need at least 3 nodes")
    cost = _matrix(t)
    origin = t.origin
    others = [v for v in t.nodes if v != origin]
    bound = _InArcBound(cost, others, origin)
    full = bound.full
    deadline = _Deadline(budget, "Branch-and-bound")
    best_value = math.inf
    floor = cheapest_out_sum(t)
    best_order: list[int] | None = None
    path: list[int] = []

    def incumbent() -> TourResult | None:
        if best_order is None:
            return None
        return TourResult.from_order(t, best_order, BRANCH_AND_BOUND, optimal=False)

    def dfs(mask: int, last: int, g: int) -> None:
        nonlocal best_value, best_order
        deadline.check(incumbent())
        if best_value <= floor:
            return
        if mask == full:
            value = g + cost[others[last]][origin]
            if value < best_value:
                best_value = value
                best_order = [origin, *(others[b] for b in path)]
            return
        row = cost[others[last]]
        rest = full & ~mask
        children = []
        while rest:
            low = rest & -rest
            rest ^= low
            w = low.bit_length() - 1
            children.append((row[others[w]], w))
        for c, w in sorted(children):
            g2 = g + c
            if g2 + bound(mask | (1 << w), w) >= best_value:
                continue
            path.append(w)
            dfs(mask | (1 << w), w, g2)
            path.pop()

    for c, b in sorted((cost[origin][v], b) for b, v in enumerate(others)):
        if best_value <= floor:
            break
        if c + bound(1 << b, b) < best_value:
            path.append(b)
            dfs(1 << b, b, c)
            path.pop()

    if best_order is None:
        raise OracleError("Branch-and-bound found no tour")
    result = TourResult.from_order(t, best_order, BRANCH_AND_BOUND)
    if result.value < floor:
        raise OracleError(f"Tour value {result.value} is below the cheapest-out sum {floor}")
    logger.info(f"Branch-and-bound closed at {result.value} in {deadline.elapsed:.1f}s")
    return result


def exact_tsp(
    t: TspInstance,
    budget: float = DEFAULT_BUDGET_SECONDS,
    method: str = "auto",
    dp_max_nodes: int = DP_MAX_NODES,
) -> TourResult:
    """Provably optimal tour; Held-Karp up to ``dp_max_nodes``, else B&B."""
    if t.n < 3:
        raise OracleError("TSP oracles need at least 3 nodes")
    if method == "auto":
        method = HELD_KARP if t.n <= dp_max_nodes else BRANCH_AND_BOUND
    if method == HELD_KARP:
        if t.n > dp_max_nodes:
            raise OracleError(f"Held-Karp is limited to {dp_max_nodes} nodes")
        _, _, order = held_karp(t, budget)
        return TourResult.from_order(t, order, HELD_KARP)
    if method == BRANCH_AND_BOUND:
        return branch_and_bound(t, budget)
    raise OracleError(f"Unknown TSP method: {method}")


def _count_reversible(t: TspInstance, optimum: int, deadline: _Deadline) -> int:
    """Optimal tours whose reversal is optimal too."""
    cost = _matrix(t)
    origin = t.origin
    others = [v for v in t.nodes if v != origin]
    forward = _InArcBound(cost, others, origin)
    backward = _InArcBound(_matrix(t, transpose=True), others, origin)
    full = forward.full

    def fits(mask: int, last: int, gf: int, gr: int) -> bool:
        return (
            gf + forward(mask, last) <= optimum and gr + backward(mask, last) <= optimum
        )

    layer: dict[tuple[int, int, int, int], int] = {}
    for b, v in enumerate(others):
        gf, gr = cost[origin][v], cost[v][origin]
        if fits(1 << b, b, gf, gr):
            layer[(1 << b, b, gf, gr)] = 1
    for _ in range(len(others) - 1):
        nxt: dict[tuple[int, int, int, int], int] = {}
        for (mask, last, gf, gr), count in layer.items():
            deadline.check()
            u = others[last]
            rest = full & ~mask
            while rest:
                low = rest & -rest
                rest ^= low
                w = low.bit_length() - 1
                key = (mask | low, w, gf + cost[u][others[w]], gr + cost[others[w]][u])
                if key in nxt:
                    nxt[key] += count
                elif fits(*key):
                    nxt[key] = count
        layer = nxt
    return sum(
        count
        for (_, last, gf, gr), count in layer.items()
        if gf + cost[others[last]][origin] == optimum
        and gr + cost[origin][others[last]] == optimum
    )


def count_optimal_tours(
    t: TspInstance,
    budget: float = DEFAULT_BUDGET_SECONDS,
    dp_max_nodes: int = DP_MAX_NODES,
) -> TourCount:
    """Count optimal tours under several conventions.

    directed: fixed origin, each direction counted; undirected: a tour and its
    reversal counted once when both are optimal; stage-assignments: staged x
    vectors with the origin at stage 1; orientations: every undirected tour
    in both directions, as if the one-way source and sink arcs ran both ways.
    """
    if t.n > dp_max_nodes:
        raise OracleError(f"Tour counting is limited to {dp_max_nodes} nodes")
    deadline = _Deadline(budget, "Tour counting")
    optimum, directed, _ = held_karp(t, budget)
    if t.is_symmetric():
        reversible = directed
    else:
        reversible = _count_reversible(t, optimum, deadline)
    undirected = directed - reversible // 2
    result = TourCount(
        value=optimum,
        directed=directed,
        undirected=undirected,
        stage_assignments=directed,
        orientations=2 * undirected,
    )
    logger.info(f"Optimal tour counts: {result.conventions()}")
    return result


def hamiltonian_cycle_exists(
    h: HcpInstance, budget: float = DEFAULT_BUDGET_SECONDS
) -> HamiltonianDecision:
    """Backtracking search from the origin with degree pruning.

    NO is exhaustive; TIMEOUT is reported when the budget runs out first.
    """
    if h.n > HCP_MAX_NODES:
        raise OracleError(f"Hamiltonicity search is limited to {HCP_MAX_NODES} nodes")
    succ = {v: h.successors(v) for v in range(1, h.n + 1)}
    pred = {v: h.predecessors(v) for v in range(1, h.n + 1)}
    start = h.origin
    if h.n < 2 or any(not succ[v] or not pred[v] for v in succ):
        return HamiltonianDecision(status=HamiltonianStatus.NO)

    deadline = _Deadline(budget, "Hamiltonicity")
    visited = [False] * (h.n + 1)
    visited[start] = True
    path = [start]
    explored = 0

    def still_reachable(current: int) -> bool:
        # Each unvisited node needs a live predecessor and a live successor.
        for w in succ:
            if visited[w]:
                continue
            if not any(u == current or not visited[u] for u in pred[w]):
                return False
            if not any(x == start or not visited[x] for x in succ[w]):
                return False
        return True

    def onward(w: int) -> int:
        return sum(1 for x in succ[w] if not visited[x])

    def extend(current: int) -> bool:
        nonlocal explored
        explored += 1
        if deadline.expired():
            raise OracleTimeoutError("Hamiltonicity search exceeded its budget")
        if len(path) == h.n:
            return start in succ[current]
        if not still_reachable(current):
            return False
        for w in sorted((x for x in succ[current] if not visited[x]), key=onward):
            visited[w] = True
            path.append(w)
            if extend(w):
                return True
            path.pop()
            visited[w] = False
        return False

    try:
        found = extend(start)
    except OracleTimeoutError:
        logger.warning(f"Hamiltonicity search timed out after {explored} nodes")
        return HamiltonianDecision(status=HamiltonianStatus.TIMEOUT, nodes_explored=explored)
    status = HamiltonianStatus.YES if found else HamiltonianStatus.NO
    logger.info(f"Hamiltonicity: {status} after {explored} search nodes")
    return HamiltonianDecision(
        status=status, order=list(path) if found else None, nodes_explored=explored
    )


def _group_graph(h: HcpInstance) -> nx.Graph:
    roles = {r for r in (h.origin, h.source, h.sink) if r}
    graph = nx.Graph()
    graph.add_nodes_from(v for v in range(1, h.n + 1) if v not in roles)
    graph.add_edges_from((i, j) for i, j in h.arcs if i not in roles and j not in roles)
    return graph


def min_path_cover_bound(h: HcpInstance) -> int:
    """Lower bound on the paths needed to cover the Group subgraph.

    A cover with p paths uses |C| - p edges per component C; in a bipartite
    component every used edge meets the smaller side, whose nodes carry at
    most two used edges each.
    """
    graph = _group_graph(h)
    paths = 0
    for component in nx.connected_components(graph):
        sub = graph.subgraph(component)
        usable = len(component) - 1
        if nx.is_bipartite(sub):
            left, right = nx.bipartite.sets(sub)
            usable = min(usable, 2 * min(len(left), len(right)))
        paths += len(component) - usable
    return paths


def path_cover_large_arc_bound(h: HcpInstance) -> int:
    """Large arcs any tour of hcp_to_tsp(h) must use.

    The tour splits the Group nodes into at least ``min_path_cover_bound``
    maximal segments of graph arcs; a segment can leave along a graph arc
    only into a distinct non-Group node, so every other exit is large.
    """
    roles = {r for r in (h.origin, h.source, h.sink) if r}
    exits = {j for i, j in h.arcs if i not in roles and j in roles}
    return max(min_path_cover_bound(h) - len(exits), 0)

