"""HCP -> TSP costing and tour-preserving node enlargements."""

import logging
from typing import NamedTuple

from .errors import ReductionError
from .instances import SINK_COST, canonical_hcp_seed
from .models import DEFAULT_LARGE, HcpInstance, SplitKind, TspInstance

logger = logging.getLogger(__name__)

DEFAULT_INTERNAL_COST = {SplitKind.SPLIT2: 1, SplitKind.SPLIT3: 2}

# Seed nodes whose replacement nodes take their neighbours out of ascending
# order: slot m is attached to the neighbour of ascending rank port_order[m].
CANONICAL_PORT_ORDERS: dict[int, tuple[int, ...]] = {17: (1, 2, 0), 19: (1, 2, 0)}


class SplitResult(NamedTuple):
    """Enlarged instance plus old node -> new node(s) map."""

    instance: TspInstance
    renumbering: dict[int, tuple[int, ...]]


def hcp_to_tsp(
    h: HcpInstance,
    small: int = 1,
    large: int = DEFAULT_LARGE,
    sink_cost: int | None = None,
) -> TspInstance:
    """Small cost on every graph arc, large cost elsewhere.

    ``sink_cost`` overrides the cost of arcs into the sink node.
    """
    if small >= large:
        raise ReductionError(f"small cost {small} must be below large cost {large}")
    if sink_cost is not None and sink_cost >= large:
        raise ReductionError(f"sink cost {sink_cost} must be below large cost {large}")
    entries = {}
    for i, j in h.arcs:
        into_sink = sink_cost is not None and j == h.sink
        entries[(i, j)] = sink_cost if into_sink else small
    return TspInstance.from_entries(
        h.n, entries, large=large, origin=h.origin, source=h.source, sink=h.sink
    )


def considered_neighbors(t: TspInstance, v: int) -> list[int]:
    """Group nodes joined to v by a non-large arc in either direction.

    Arcs to or from the origin, source and sink are not considered.
    """
    roles = t.role_nodes
    return [
        w
        for w in t.nodes
        if w != v
        and w not in roles
        and not (t.is_large(v, w) and t.is_large(w, v))
    ]


def split_node(
    t: TspInstance,
    v: int,
    kind: SplitKind,
    internal_cost: int | None = None,
    port_order: tuple[int, ...] | None = None,
) -> SplitResult:
    """Replace v by 2 or 3 mutually linked nodes, one considered arc each.

    Replacement nodes take ids v..v+k-1; later nodes shift up by k-1.
    Arcs to non-considered nodes (origin, source, sink) are copied to
    every replacement node.
    """
    if v in t.role_nodes:
        raise ReductionError(f"Node {v} is the origin, source or sink")
    if not 1 <= v <= t.n:
        raise ReductionError(f"Node {v} outside 1..{t.n}")
    neighbors = considered_neighbors(t, v)
    k = kind.size
    if len(neighbors) != k:
        raise ReductionError(
            f"Node {v} has considered degree {len(neighbors)}; {kind} needs {k}"
        )
    port_order = port_order or tuple(range(k))
    if sorted(port_order) != list(range(k)):
        raise ReductionError(f"Invalid port order {port_order} for {kind}")
    if internal_cost is None:
        internal_cost = DEFAULT_INTERNAL_COST[kind]

    def renumber(u: int) -> int:
        return u if u < v else u + k - 1

    n = t.n + k - 1
    replacements = tuple(range(v, v + k))
    rows = [[0 if a == b else t.large for b in range(n)] for a in range(n)]

    def put(a: int, b: int, c: int) -> None:
        rows[a - 1][b - 1] = c

    others = [u for u in t.nodes if u != v]
    for a in others:
        for b in others:
            if a != b:
                put(renumber(a), renumber(b), t.cost_of(a, b))
    attached = {neighbors[rank]: r for r, rank in zip(replacements, port_order, strict=True)}
    for w in others:
        for r in replacements:
            if w in attached and attached[w] != r:
                continue
            put(r, renumber(w), t.cost_of(v, w))
            put(renumber(w), r, t.cost_of(w, v))
    for a in replacements:
        for b in replacements:
            if a != b:
                put(a, b, internal_cost)

    instance = TspInstance(
        n=n,
        cost=tuple(tuple(row) for row in rows),
        large=t.large,
        origin=renumber(t.origin),
        source=None if t.source is None else renumber(t.source),
        sink=None if t.sink is None else renumber(t.sink),
    )
    renumbering = {u: (renumber(u),) for u in others}
    renumbering[v] = replacements
    logger.debug(f"Split node {v} ({kind}) into {replacements}")
    return SplitResult(instance, renumbering)


def enlarge_all(
    t: TspInstance,
    split2_cost: int = DEFAULT_INTERNAL_COST[SplitKind.SPLIT2],
    split3_cost: int = DEFAULT_INTERNAL_COST[SplitKind.SPLIT3],
    port_orders: dict[int, tuple[int, ...]] | None = None,
) -> SplitResult:
    """Split every Group node by its considered degree.

    Nodes are processed from the highest id down so each node keeps its id
    until its own turn; the resulting numbering lists replacement blocks in
    original node order.
    """
    port_orders = port_orders or {}
    current = t
    mapping = {u: (u,) for u in t.nodes}
    for v in sorted(t.group_nodes(), reverse=True):
        degree = len(considered_neighbors(current, v))
        try:
            kind = SplitKind.for_degree(degree)
        except ValueError as e:
            raise ReductionError(f"Group node {v}: {e}") from e
        cost = split2_cost if kind is SplitKind.SPLIT2 else split3_cost
        current, step = split_node(current, v, kind, cost, port_orders.get(v))
        mapping = {
            u: tuple(x for c in ids for x in step.get(c, (c,)))
            for u, ids in mapping.items()
        }
    logger.info(f"Enlarged {t.n}-node instance to {current.n} nodes")
    return SplitResult(current, mapping)


def contract_tour(order: list[int], renumbering: dict[int, tuple[int, ...]]) -> list[int]:
    """Map a tour of the enlarged instance back to original node ids.

    Each original node takes the position of its first visited replacement.
    """
    original = {new: old for old, news in renumbering.items() for new in news}
    seen: set[int] = set()
    contracted = []
    for node in order:
        old = original[node]
        if old not in seen:
            seen.add(old)
            contracted.append(old)
    return contracted


def canonical_enlargement(large: int = DEFAULT_LARGE) -> SplitResult:
    """Seed -> TSP costing -> enlargement, the route to the 51-node instance."""
    seed_tsp = hcp_to_tsp(canonical_hcp_seed(), 1, large, sink_cost=SINK_COST)
    return enlarge_all(seed_tsp, port_orders=CANONICAL_PORT_ORDERS)


def support_graph(t: TspInstance) -> HcpInstance:
    """Graph of the non-LARGE arcs, roles kept."""
    arcs = frozenset(
        (i, j) for i in t.nodes for j in t.nodes if i != j and not t.is_large(i, j)
    )
    return HcpInstance(n=t.n, arcs=arcs, origin=t.origin, source=t.source, sink=t.sink)
