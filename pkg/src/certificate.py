"""Fractional certificate: the staged x assignment and its conditional-flow lift."""

from collections import defaultdict, deque
from collections.abc import Iterable, Iterator, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
import copy
from dataclasses import dataclass
from enum import StrEnum
from fractions import Fraction
from functools import cached_property, lru_cache
import logging
from pathlib import Path
import random
from typing import NamedTuple

import networkx as nx

from .artifacts import timestamp_header, write_lines_atomic
from .errors import CertificateError, InstanceFormatError, LiftRepairError
from .instances import SPLIT_WEIGHTS
from .lp_model import build_base_rows, evaluate_row, is_valid_arc
from .models import (
    ObjectiveSummary,
    StageArc,
    StagePlan,
    TspInstance,
    format_fraction,
    parse_fraction,
)

logger = logging.getLogger(__name__)

DEFAULT_FLOW_CONSTANT = Fraction(192)
DEFAULT_REPAIR_MAX_MOVES = 10_000
ZERO = Fraction(0)


@dataclass(frozen=True)
class SparseFlow:
    """Non-zero x values with per-node stage indices."""

    entries: Mapping[StageArc, Fraction]
    flow_constant: Fraction = DEFAULT_FLOW_CONSTANT

    def __post_init__(self) -> None:
        cleaned = {StageArc(*a): Fraction(v) for a, v in self.entries.items() if v != 0}
        if any(v < 0 for v in cleaned.values()):
            raise CertificateError("Certificate values must be non-negative")
        object.__setattr__(self, "entries", cleaned)

    def get(self, a: StageArc) -> Fraction:
        return self.entries.get(a, ZERO)

    def __len__(self) -> int:
        return len(self.entries)

    @cached_property
    def support(self) -> list[StageArc]:
        return sorted(self.entries)

    @cached_property
    def out_index(self) -> dict[tuple[int, int], list[tuple[StageArc, Fraction]]]:
        """(node, stage) -> arcs leaving node at that stage."""
        index = defaultdict(list)
        for a in self.support:
            index[(a.i, a.s)].append((a, self.entries[a]))
        return dict(index)

    @cached_property
    def in_index(self) -> dict[tuple[int, int], list[tuple[StageArc, Fraction]]]:
        """(node, stage) -> arcs entering node at that stage."""
        index = defaultdict(list)
        for a in self.support:
            index[(a.j, a.s)].append((a, self.entries[a]))
        return dict(index)

    @cached_property
    def out_totals(self) -> dict[tuple[int, int], Fraction]:
        return {key: sum((v for _, v in arcs), ZERO) for key, arcs in self.out_index.items()}

    @cached_property
    def in_totals(self) -> dict[tuple[int, int], Fraction]:
        return {key: sum((v for _, v in arcs), ZERO) for key, arcs in self.in_index.items()}

    def with_value(self, a: StageArc, value: Fraction) -> "SparseFlow":
        """Copy with one entry replaced."""
        entries = dict(self.entries)
        entries[a] = Fraction(value)
        return SparseFlow(entries, self.flow_constant)

    def invalid_support(self, t: TspInstance) -> list[StageArc]:
        return [a for a in self.support if not is_valid_arc(t, *a)]


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise CertificateError(message)


def generate_x_certificate(
    t: TspInstance,
    flow_constant: Fraction | int = DEFAULT_FLOW_CONSTANT,
    stage_plan: StagePlan | str = StagePlan.REPAIRED,
    integer_mode: bool = False,
) -> SparseFlow:
    """Staged x for the origin -> source -> Group -> sink -> origin structure.

    F leaves the origin, the source spreads F/G to each of the G Group nodes,
    each Group node passes its share along its small arcs with weight 1/2
    (cost 1) or 1/4 (cost 2) per stage, then every Group node drains F/G into
    the sink at stage n-1 and the sink returns F at stage n.

    The repaired plan uses internal stages 3..n-2. The annex-c plan runs
    internal stages through n-1, overlapping the sink hop.

    In integer mode F must be a multiple of 4G (192 for the canonical
    instance) so every value is an integer.
    """
    stage_plan = StagePlan(stage_plan)
    F = Fraction(flow_constant)
    _require(F > 0, "Flow constant must be positive")
    _require(
        t.source is not None and t.sink is not None,
        "Instance needs source and sink roles",
    )
    assert t.source is not None and t.sink is not None
    group = t.group_nodes()
    _require(len(group) >= 2 and t.n >= 5, f"Instance too small: n={t.n}")
    o, src, snk = t.origin, t.source, t.sink
    _require(not t.is_large(o, src), "Origin -> source arc is LARGE")
    _require(not t.is_large(snk, o), "Sink -> origin arc is LARGE")
    for g in group:
        _require(not t.is_large(src, g), f"Source -> {g} arc is LARGE")
        _require(not t.is_large(g, snk), f"{g} -> sink arc is LARGE")

    weights: dict[tuple[int, int], Fraction] = {}
    for k in group:
        for j in group:
            if k == j or t.is_large(k, j):
                continue
            w = SPLIT_WEIGHTS.get(t.cost_of(k, j))
            _require(w is not None, f"Group arc ({k},{j}) has cost {t.cost_of(k, j)}")
            assert w is not None
            weights[(k, j)] = w
    for k in group:
        out_w = sum((w for (a, _), w in weights.items() if a == k), ZERO)
        in_w = sum((w for (_, b), w in weights.items() if b == k), ZERO)
        _require(out_w == 1 and in_w == 1, f"Split weights at node {k} sum to {out_w}/{in_w}")

    if integer_mode:
        divisor = 4 * len(group)
        _require(
            F.denominator == 1 and F % divisor == 0,
            f"Integer mode needs F divisible by {divisor}, got {format_fraction(F)}",
        )
    share = F / len(group)
    last_internal = t.n - 2 if stage_plan is StagePlan.REPAIRED else t.n - 1
    entries: dict[StageArc, Fraction] = {StageArc(o, 1, src): F}
    for g in group:
        entries[StageArc(src, 2, g)] = share
    for s in range(3, last_internal + 1):
        for (k, j), w in weights.items():
            entries[StageArc(k, s, j)] = share * w
    for g in group:
        entries[StageArc(g, t.n - 1, snk)] = share
    entries[StageArc(snk, t.n, o)] = F
    x = SparseFlow(entries, F)
    logger.info(
        f"Generated {stage_plan} certificate: {len(x)} non-zero entries, F={format_fraction(F)}"
    )
    return x


def check_integer_mode(x: SparseFlow) -> None:
    """Unit perturbations need an integral certificate."""
    fractional = [a for a in x.support if x.entries[a].denominator != 1]
    if x.flow_constant.denominator != 1 or fractional:
        where = fractional[0].label() if fractional else "F"
        raise CertificateError(
            f"Integer mode needs integral values; {len(fractional)} fractional, first at {where}"
        )


def tour_certificate(
    t: TspInstance, order: list[int], flow_constant: Fraction | int = 1
) -> SparseFlow:
    """Integral point: F on each arc of ``order`` at its tour position."""
    _require(sorted(order) == list(t.nodes), "Tour must visit every node once")
    _require(order[0] == t.origin, "Tour must start at the origin")
    F = Fraction(flow_constant)
    nxt = order[1:] + order[:1]
    return SparseFlow(
        {StageArc(i, s, j): F for s, (i, j) in enumerate(zip(order, nxt, strict=True), start=1)},
        F,
    )


def certificate_objective(x: SparseFlow, t: TspInstance) -> ObjectiveSummary:
    """Per-unit-flow objective and the costliest arc in support."""
    if not x.entries:
        return ObjectiveSummary(ZERO, 0)
    total = sum((t.cost_of(a.i, a.j) * v for a, v in x.entries.items()), ZERO)
    return ObjectiveSummary(
        total / x.flow_constant, max(t.cost_of(a.i, a.j) for a in x.entries)
    )


def emission_profile(x: SparseFlow, t: TspInstance) -> dict[int, dict[int, Fraction]]:
    """Group node -> {stage: outflow} over stages with outflow."""
    group = set(t.group_nodes())
    profile: dict[int, dict[int, Fraction]] = {g: {} for g in sorted(group)}
    for (k, s), total in sorted(x.out_totals.items()):
        if k in group:
            profile[k][s] = total
    return profile


class VisitMass(NamedTuple):
    """Inflow into one node summed over stages."""

    with_source_hop: Fraction
    internal: Fraction


def visit_mass(x: SparseFlow, t: TspInstance) -> dict[int, VisitMass]:
    """Both visit tallies per Group node: counting the stage-2 hop, and not."""
    result = {}
    for g in t.group_nodes():
        total = internal = ZERO
        for s in t.nodes:
            for a, v in x.in_index.get((g, s), ()):
                total += v
                if a.i != t.source:
                    internal += v
        result[g] = VisitMass(total, internal)
    return result


class EscapeReport(NamedTuple):
    subsets_checked: int
    min_leaving: Fraction
    witness: tuple[frozenset[int], int] | None
    violations: int


def _group_graph(x: SparseFlow, t: TspInstance) -> nx.Graph:
    group = set(t.group_nodes())
    g = nx.Graph()
    g.add_nodes_from(sorted(group))
    g.add_edges_from((a.i, a.j) for a in x.support if a.i in group and a.j in group)
    return g


def _connected_subsets(graph: nx.Graph, max_size: int) -> Iterator[frozenset[int]]:
    """Every connected node set up to ``max_size``, each once.

    Sets grow from their smallest node through larger neighbours only.
    """
    for root in sorted(graph.nodes):
        stack = [(frozenset([root]), frozenset(w for w in graph[root] if w > root))]
        while stack:
            current, frontier = stack.pop()
            yield current
            if len(current) == max_size:
                continue
            excluded: set[int] = set()
            for w in sorted(frontier):
                excluded.add(w)
                grown = current | {w}
                extra = {u for u in graph[w] if u > root and u not in grown and u not in frontier}
                stack.append((grown, frozenset((frontier - excluded) | extra)))


def _grow_subset(graph: nx.Graph, rng: random.Random, size: int) -> frozenset[int]:
    nodes = sorted(graph.nodes)
    chosen = {rng.choice(nodes)}
    while len(chosen) < size:
        frontier = sorted({w for v in chosen for w in graph[v]} - chosen)
        if not frontier:
            break
        chosen.add(rng.choice(frontier))
    return frozenset(chosen)


def escape_cut_check(
    x: SparseFlow,
    t: TspInstance,
    max_size: int = 6,
    samples: int = 0,
    seed: int = 0,
) -> EscapeReport:
    """Flow leaving every connected Group subset S at every internal stage.

    Every proper S must let at least F/G escape per stage, the amount a
    single node emits. Subsets up to ``max_size`` are enumerated; ``samples``
    larger ones are grown at random from ``seed``.
    """
    graph = _group_graph(x, t)
    group_size = graph.number_of_nodes()
    if group_size == 0:
        return EscapeReport(0, ZERO, None, 0)
    required = x.flow_constant / group_size
    stages = sorted({a.s for a in x.support if a.i in graph and a.j in graph})
    # Stages with identical Group outflow share one evaluation.
    classes: dict[tuple, list[int]] = defaultdict(list)
    for s in stages:
        key = tuple(sorted((a.i, a.j, v) for k in graph for a, v in x.out_index.get((k, s), ())))
        classes[key].append(s)
    subsets: list[frozenset[int]] = list(_connected_subsets(graph, max_size))
    rng = random.Random(seed)
    for _ in range(samples):
        if group_size - 1 > max_size:
            subsets.append(_grow_subset(graph, rng, rng.randint(max_size + 1, group_size - 1)))
    checked = violations = 0
    worst: Fraction | None = None
    witness = None
    for subset in subsets:
        if len(subset) == group_size:
            continue
        for same in classes.values():
            s = same[0]
            leaving = sum(
                (v for k in subset for a, v in x.out_index.get((k, s), ()) if a.j not in subset),
                ZERO,
            )
            checked += len(same)
            if leaving < required:
                violations += len(same)
            if worst is None or leaving < worst:
                worst, witness = leaving, (subset, s)
    logger.info(f"Escape check over {len(subsets)} subsets: min leaving {worst}")
    return EscapeReport(checked, worst if worst is not None else ZERO, witness, violations)


def _span(values: Iterable[Fraction], render=str) -> str:
    values = sorted(set(values))
    if not values:
        return "-"
    if len(values) == 1:
        return render(values[0])
    return f"{render(values[0])}..{render(values[-1])}"


class CertificateDiagnostics(NamedTuple):
    """Per-node emission, both visit tallies and the escape check of one x."""

    emission: dict[int, dict[int, Fraction]]
    visits: dict[int, VisitMass]
    escape: EscapeReport

    def lines(self) -> list[str]:
        outflow = [v for stages in self.emission.values() for v in stages.values()]
        hop = [m.with_source_hop for m in self.visits.values()]
        internal = [m.internal for m in self.visits.values()]
        e = self.escape
        return [
            f"Emission: {len(outflow)} Group node-stage pairs, outflow {_span(outflow)}",
            f"Visit mass with source hop: {_span(hop)}",
            f"Visit mass without source hop: {_span(internal)}",
            f"Escape: {e.subsets_checked} subset-stage pairs, min leaving "
            f"{e.min_leaving}, {e.violations} below F/G",
        ]

    def machine_line(self) -> str:
        outflow = [v for stages in self.emission.values() for v in stages.values()]
        hop = [m.with_source_hop for m in self.visits.values()]
        internal = [m.internal for m in self.visits.values()]
        e = self.escape
        return (
            f"diagnostics emission={_span(outflow, format_fraction)} "
            f"visits_with_hop={_span(hop, format_fraction)} "
            f"visits_internal={_span(internal, format_fraction)} "
            f"escape_pairs={e.subsets_checked} escape_min={format_fraction(e.min_leaving)} "
            f"escape_violations={e.violations}"
        )


def certificate_diagnostics(
    x: SparseFlow, t: TspInstance, escape_subset_size: int = 6
) -> CertificateDiagnostics:
    return CertificateDiagnostics(
        emission_profile(x, t),
        visit_mass(x, t),
        escape_cut_check(x, t, max_size=escape_subset_size),
    )


class LiftRule(StrEnum):
    CONDITIONED = "conditioned"
    PROPORTIONAL = "proportional"
    EXPLICIT = "explicit"


class ConditionalFlowSet(Mapping[StageArc, dict[StageArc, Fraction]]):
    """Lazy y: anchor -> conditional flow.

    ``conditioned``: the units of x that use the anchor, followed forward and
    backward through x in proportion to x at each node and stage. For the
    origin anchor this is x itself.
    ``proportional``: y(a, b) = x(a) x(b) / F off the anchor's stage.
    ``explicit``: entries loaded from a file.

    Reroutes from ``repair_conditional_flows`` are stored as per-anchor
    changes on top of the rule. The set holds a reference to the x it was
    built from; pairing it with a different x does not re-lift.
    """

    def __init__(
        self,
        x: SparseFlow,
        rule: LiftRule | str = LiftRule.CONDITIONED,
        cache_size: int = 512,
        explicit: Mapping[StageArc, Mapping[StageArc, Fraction]] | None = None,
    ):
        self.x = x
        self.rule = LiftRule(rule)
        self._explicit = {
            a: {b: Fraction(v) for b, v in flow.items() if v != 0}
            for a, flow in (explicit or {}).items()
        }
        self._overrides: dict[StageArc, dict[StageArc, Fraction]] = {}
        self._repairs: dict[StageArc, dict[StageArc, Fraction]] = {}
        self.moves: dict[StageArc, int] = {}
        self.unresolved: dict[str, Fraction] = {}
        self._transposed: dict[StageArc, dict[StageArc, Fraction]] | None = None
        self._forward = lru_cache(maxsize=cache_size)(self._forward_unit)
        self._backward = lru_cache(maxsize=cache_size)(self._backward_unit)

    def _forward_unit(self, k: int, s: int) -> dict[StageArc, Fraction]:
        """Unit mass at k leaving at stage s, pushed to the end."""
        x = self.x
        result: dict[StageArc, Fraction] = defaultdict(Fraction)
        mass = {k: Fraction(1)}
        stage = s
        while mass and stage in range(1, self._last_stage + 1):
            nxt: dict[int, Fraction] = defaultdict(Fraction)
            for node, m in mass.items():
                total = x.out_totals.get((node, stage))
                if not total:
                    continue
                for a, v in x.out_index[(node, stage)]:
                    share = m * v / total
                    result[a] += share
                    nxt[a.j] += share
            mass = nxt
            stage += 1
        return dict(result)

    def _backward_unit(self, k: int, s: int) -> dict[StageArc, Fraction]:
        """Unit mass that reached k by stage s, traced to the start."""
        x = self.x
        result: dict[StageArc, Fraction] = defaultdict(Fraction)
        mass = {k: Fraction(1)}
        stage = s
        while mass and stage >= 1:
            prev: dict[int, Fraction] = defaultdict(Fraction)
            for node, m in mass.items():
                total = x.in_totals.get((node, stage))
                if not total:
                    continue
                for a, v in x.in_index[(node, stage)]:
                    share = m * v / total
                    result[a] += share
                    prev[a.i] += share
            mass = prev
            stage -= 1
        return dict(result)

    @cached_property
    def _last_stage(self) -> int:
        return max((a.s for a in self.x.support), default=0)

    def anchors(self) -> list[StageArc]:
        if self.rule is LiftRule.EXPLICIT:
            base = set(self._explicit)
        else:
            base = set(self.x.support)
        return sorted(base | set(self._overrides))

    def __iter__(self) -> Iterator[StageArc]:
        return iter(self.anchors())

    def __len__(self) -> int:
        return len(self.anchors())

    def __getitem__(self, a: StageArc) -> dict[StageArc, Fraction]:
        base = self._explicit if self.rule is LiftRule.EXPLICIT else self.x.entries
        if a not in self._overrides and a not in base:
            raise KeyError(a)
        return self.flow(a)

    def _lifted_flow(self, a: StageArc) -> dict[StageArc, Fraction]:
        if self.rule is LiftRule.EXPLICIT:
            return dict(self._explicit.get(a, {}))
        xa = self.x.get(a)
        if xa == 0:
            return {}
        if self.rule is LiftRule.PROPORTIONAL:
            F = self.x.flow_constant
            flow = {b: xa * xb / F for b, xb in self.x.entries.items() if b.s != a.s}
        else:
            flow = {b: xa * u for b, u in self._forward(a.j, a.s + 1).items()}
            flow.update((b, xa * u) for b, u in self._backward(a.i, a.s - 1).items())
        flow[a] = xa
        return {b: v for b, v in flow.items() if v != 0}

    def flow(self, a: StageArc) -> dict[StageArc, Fraction]:
        """Non-zero y(a, .) entries."""
        if a in self._overrides:
            return dict(self._overrides[a])
        flow = self._lifted_flow(a)
        for b, change in self._repairs.get(a, {}).items():
            flow[b] = flow.get(b, ZERO) + change
        return {b: v for b, v in flow.items() if v != 0}

    def entry(self, a: StageArc, b: StageArc) -> Fraction:
        if a in self._overrides or self.rule is not LiftRule.CONDITIONED:
            return self.flow(a).get(b, ZERO)
        if a in self._repairs:
            return self._lifted_entry(a, b) + self._repairs[a].get(b, ZERO)
        return self._lifted_entry(a, b)

    def _lifted_entry(self, a: StageArc, b: StageArc) -> Fraction:
        xa = self.x.get(a)
        if xa == 0:
            return ZERO
        if b == a:
            return xa
        if b.s > a.s:
            return xa * self._forward(a.j, a.s + 1).get(b, ZERO)
        if b.s < a.s:
            return xa * self._backward(a.i, a.s - 1).get(b, ZERO)
        return ZERO

    def column(self, a: StageArc) -> dict[StageArc, Fraction]:
        """Non-zero y(b, a) over anchors b != a."""
        match self.rule:
            case LiftRule.CONDITIONED:
                column = self._conditioned_column(a)
            case LiftRule.PROPORTIONAL:
                xa, F = self.x.get(a), self.x.flow_constant
                column = {b: xb * xa / F for b, xb in self.x.entries.items() if b.s != a.s}
            case _:
                column = dict(self._transposed_index().get(a, {}))
        for b, changes in self._repairs.items():
            if a in changes:
                column[b] = column.get(b, ZERO) + changes[a]
        for b, flow in self._overrides.items():
            if b != a:
                column[b] = flow.get(a, ZERO)
        column.pop(a, None)
        return {b: v for b, v in column.items() if v != 0}

    def _conditioned_column(self, a: StageArc) -> dict[StageArc, Fraction]:
        # Backward share of a seen from each later node (and forward share
        # from each earlier one), one stage sweep in each direction.
        x = self.x
        xa = x.get(a)
        column: dict[StageArc, Fraction] = {}
        if xa == 0:
            return column
        share = {a.j: xa / x.in_totals[(a.j, a.s)]}
        for q in range(a.s + 1, self._last_stage + 1):
            nxt: dict[int, Fraction] = defaultdict(Fraction)
            for b, xb in (p for k in share for p in x.out_index.get((k, q), ())):
                contribution = xb * share[b.i]
                column[b] = contribution
                nxt[b.j] += contribution / x.in_totals[(b.j, q)]
            share = nxt
            if not share:
                break
        share = {a.i: xa / x.out_totals[(a.i, a.s)]}
        for q in range(a.s - 1, 0, -1):
            prev: dict[int, Fraction] = defaultdict(Fraction)
            for b, xb in (p for k in share for p in x.in_index.get((k, q), ())):
                contribution = xb * share[b.j]
                column[b] = contribution
                prev[b.i] += contribution / x.out_totals[(b.i, q)]
            share = prev
            if not share:
                break
        return column

    def _transposed_index(self) -> dict[StageArc, dict[StageArc, Fraction]]:
        if self._transposed is None:
            transposed: dict[StageArc, dict[StageArc, Fraction]] = defaultdict(dict)
            for a, flow in self._explicit.items():
                for b, v in flow.items():
                    transposed[b][a] = v
            self._transposed = dict(transposed)
        return self._transposed

    def with_entry(self, a: StageArc, b: StageArc, value: Fraction | int) -> "ConditionalFlowSet":
        """Copy with y(a, b) replaced; lift caches are shared."""
        flow = self.flow(a)
        flow[b] = Fraction(value)
        return self.with_flow(a, flow)

    def with_flow(self, a: StageArc, flow: Mapping[StageArc, Fraction]) -> "ConditionalFlowSet":
        clone = copy.copy(self)
        clone._overrides = {**self._overrides, a: {b: v for b, v in flow.items() if v != 0}}
        return clone

    def with_repairs(
        self,
        repairs: Mapping[StageArc, Mapping[StageArc, Fraction]],
        moves: Mapping[StageArc, int],
        unresolved: Mapping[str, Fraction],
    ) -> "ConditionalFlowSet":
        """Copy with per-anchor reroute changes layered over the rule."""
        clone = copy.copy(self)
        clone._repairs = {a: dict(changes) for a, changes in sorted(repairs.items())}
        clone.moves = dict(sorted(moves.items()))
        clone.unresolved = dict(unresolved)
        return clone

    def stored_entries(self) -> Iterator[tuple[StageArc, StageArc, Fraction]]:
        """(anchor, probe, value) in anchor then probe order."""
        for a in self.anchors():
            for b, v in sorted(self.flow(a).items()):
                yield a, b, v


class _Reroute(NamedTuple):
    """Visit mass moved from ``source`` to ``target`` on the hop u -> . -> z."""

    source: int
    target: int
    u: int
    s: int
    z: int


class _DetourIndex:
    """Two-hop detours inside support(x): (u, s, z) -> middle nodes w."""

    def __init__(self, x: SparseFlow, t: TspInstance):
        self.x = x
        self.t = t
        self._between: dict[tuple[int, int, int], tuple[int, ...]] = {}

    def between(self, u: int, s: int, z: int) -> tuple[int, ...]:
        key = (u, s, z)
        if key not in self._between:
            entries = self.x.entries
            self._between[key] = tuple(
                sorted(
                    a.j
                    for a, _ in self.x.out_index.get((u, s), ())
                    if StageArc(a.j, s + 1, z) in entries
                    and is_valid_arc(self.t, u, s, a.j)
                    and is_valid_arc(self.t, a.j, s + 1, z)
                )
            )
        return self._between[key]


class _AnchorRepair:
    """Reroutes one anchor's conditional flow until every node is entered x(a) times.

    A reroute swaps the middle of a two-hop segment u -> v -> z for another
    middle node w with u -> w -> z in support(x). Conservation and stage
    totals are untouched; only the visit counts of v and w change. Stages
    next to the anchor stay fixed, and stage 2 stays fixed for stage-1
    anchors so the C6 pairing is kept.
    """

    def __init__(self, a: StageArc, flow: dict[StageArc, Fraction], detours: _DetourIndex):
        self.a = a
        self.detours = detours
        self.n = detours.t.n
        self.original = flow
        self.flow = dict(flow)
        self.frozen = {a.s, 2} if a.s == 1 else {a.s}
        self.into: dict[tuple[int, int], set[int]] = defaultdict(set)
        self.out: dict[tuple[int, int], set[int]] = defaultdict(set)
        visits: dict[int, Fraction] = defaultdict(Fraction)
        for b, v in flow.items():
            if b.s != a.s or b == a:
                visits[b.j] += v
            self._link(b)
        xa = flow.get(a, ZERO)
        self.residual = {k: visits[k] - xa for k in detours.t.nodes}

    def _link(self, b: StageArc) -> None:
        self.into[(b.j, b.s)].add(b.i)
        self.out[(b.i, b.s)].add(b.j)

    def _set(self, b: StageArc, value: Fraction) -> None:
        if value == 0:
            self.flow.pop(b, None)
            self.into[(b.j, b.s)].discard(b.i)
            self.out[(b.i, b.s)].discard(b.j)
        else:
            self.flow[b] = value
            self._link(b)

    def _chain(self, start: int) -> list[_Reroute] | None:
        """Shortest reroute chain from ``start`` to an under-visited node."""
        parents: dict[int, _Reroute | None] = {start: None}
        queue = deque([start])
        while queue:
            c = queue.popleft()
            for s in range(1, self.n):
                if s in self.frozen or s + 1 in self.frozen:
                    continue
                for u in sorted(self.into.get((c, s), ())):
                    for z in sorted(self.out.get((c, s + 1), ())):
                        for w in self.detours.between(u, s, z):
                            if w in parents:
                                continue
                            parents[w] = _Reroute(c, w, u, s, z)
                            if self.residual[w] < 0:
                                return self._trace(parents, w)
                            queue.append(w)
        return None

    @staticmethod
    def _trace(parents: dict[int, "_Reroute | None"], end: int) -> list[_Reroute]:
        chain = []
        step = parents[end]
        while step is not None:
            chain.append(step)
            step = parents[step.source]
        return chain[::-1]

    def _apply(self, chain: list[_Reroute]) -> Fraction:
        coef: dict[StageArc, int] = defaultdict(int)
        for m in chain:
            coef[StageArc(m.u, m.s, m.source)] -= 1
            coef[StageArc(m.source, m.s + 1, m.z)] -= 1
            coef[StageArc(m.u, m.s, m.target)] += 1
            coef[StageArc(m.target, m.s + 1, m.z)] += 1
        start, end = chain[0].source, chain[-1].target
        step = min(
            self.residual[start],
            -self.residual[end],
            *(self.flow[b] / -c for b, c in coef.items() if c < 0),
        )
        for b, c in sorted(coef.items()):
            if c:
                self._set(b, self.flow.get(b, ZERO) + c * step)
        self.residual[start] -= step
        self.residual[end] += step
        return step

    def run(self, max_moves: int) -> int:
        moves = 0
        while moves < max_moves:
            chain = None
            for v in sorted(k for k, r in self.residual.items() if r > 0):
                chain = self._chain(v)
                if chain is not None:
                    break
            if chain is None:
                break
            step = self._apply(chain)
            moves += 1
            logger.debug(
                f"Reroute {moves} on {self.a.label()}: {chain[0].source} -> {chain[-1].target} "
                f"via {len(chain)} hops, {step}"
            )
        return moves

    def delta(self) -> dict[StageArc, Fraction]:
        keys = set(self.flow) | set(self.original)
        changes = {b: self.flow.get(b, ZERO) - self.original.get(b, ZERO) for b in keys}
        return {b: v for b, v in sorted(changes.items()) if v != 0}

    def unresolved(self) -> dict[str, Fraction]:
        label = self.a.label()
        return {f"C11[a={label},k={k}]": r for k, r in sorted(self.residual.items()) if r != 0}


def _repair_chunk(
    y: ConditionalFlowSet,
    anchors: Sequence[StageArc],
    detours: _DetourIndex,
    max_moves: int,
) -> tuple[dict[StageArc, dict[StageArc, Fraction]], dict[StageArc, int], dict[str, Fraction]]:
    repairs: dict[StageArc, dict[StageArc, Fraction]] = {}
    moves: dict[StageArc, int] = {}
    unresolved: dict[str, Fraction] = {}
    for count, a in enumerate(anchors, start=1):
        repair = _AnchorRepair(a, y.flow(a), detours)
        if any(repair.residual.values()):
            done = repair.run(max_moves)
            if done:
                repairs[a] = repair.delta()
                moves[a] = done
            unresolved.update(repair.unresolved())
        if count % 500 == 0:
            logger.debug(f"Repaired {count}/{len(anchors)} anchors in chunk")
    return repairs, moves, unresolved


def repair_conditional_flows(
    y: ConditionalFlowSet,
    t: TspInstance,
    threads: int = 1,
    max_moves: int = DEFAULT_REPAIR_MAX_MOVES,
) -> ConditionalFlowSet:
    """Reroute every anchor's flow until each node is entered x(a) times.

    Over-visited nodes are handled lowest index first; each reroute chain
    is the shortest one (lowest-index middle nodes first) reaching an
    under-visited node. Visit residuals left after ``max_moves`` reroutes
    or with no chain available are kept in ``unresolved``.
    """
    detours = _DetourIndex(y.x, t)
    ordered = y.anchors()
    workers = max(1, min(threads, len(ordered)))
    size = -(-len(ordered) // workers) if ordered else 0
    chunks = [ordered[i : i + size] for i in range(0, len(ordered), size)] if size else []
    with ThreadPoolExecutor(max_workers=workers) as executor:
        parts = list(executor.map(lambda chunk: _repair_chunk(y, chunk, detours, max_moves), chunks))
    repairs: dict[StageArc, dict[StageArc, Fraction]] = {}
    moves: dict[StageArc, int] = {}
    unresolved: dict[str, Fraction] = {}
    for part_repairs, part_moves, part_unresolved in parts:
        repairs.update(part_repairs)
        moves.update(part_moves)
        unresolved.update(part_unresolved)
    repaired = y.with_repairs(repairs, moves, unresolved)
    logger.info(
        f"Rerouted {sum(moves.values())} times on {len(moves)} of {len(ordered)} anchors; "
        f"{len(unresolved)} visit rows unresolved"
    )
    return repaired


def base_residuals(x: SparseFlow, t: TspInstance) -> dict[str, Fraction]:
    """Non-zero BASE row residuals, keyed by row name."""
    residuals = {}
    for row in build_base_rows(t, x.flow_constant):
        r = evaluate_row(row, lambda v: x.get(v) if isinstance(v, StageArc) else ZERO)
        if r != 0:
            residuals[row.name] = r
    return residuals


def lift_conditional_flows(
    x: SparseFlow,
    t: TspInstance,
    rule: LiftRule | str = LiftRule.CONDITIONED,
    cache_size: int = 512,
    repair: bool = True,
    threads: int = 1,
    max_moves: int = DEFAULT_REPAIR_MAX_MOVES,
    strict: bool = True,
) -> ConditionalFlowSet:
    """Conditional flows for every anchor in support(x).

    x must satisfy BASE exactly; otherwise no lift is built and the
    offending residuals travel with the error. The conditioned rule is
    then rerouted anchor by anchor; with ``strict`` any visit residual the
    reroutes cannot clear raises, otherwise it stays on ``unresolved``.
    """
    residuals = base_residuals(x, t)
    if residuals:
        worst = max(residuals.items(), key=lambda item: abs(item[1]))
        raise LiftRepairError(
            f"x violates {len(residuals)} BASE rows (worst {worst[0]}: {worst[1]})",
            residuals,
        )
    y = ConditionalFlowSet(x, rule, cache_size)
    logger.info(f"Lifted {len(x)} anchors with the {y.rule} rule")
    if repair and y.rule is LiftRule.CONDITIONED:
        y = repair_conditional_flows(y, t, threads, max_moves)
        if y.unresolved and strict:
            anchors = len({row.split(",k=")[0] for row in y.unresolved})
            raise LiftRepairError(
                f"repair left {len(y.unresolved)} visit rows on {anchors} anchors",
                y.unresolved,
            )
    return y


def write_certificate(
    x: SparseFlow,
    path: Path,
    y: ConditionalFlowSet | None = None,
    timestamp: bool = False,
) -> Path:
    """``F=`` header, ``x`` lines, then ``y`` lines when y is given."""

    def lines() -> Iterator[str]:
        if timestamp:
            yield timestamp_header()
        yield f"F={format_fraction(x.flow_constant)}"
        for a in x.support:
            yield f"x {a.i} {a.s} {a.j} {format_fraction(x.entries[a])}"
        if y is not None:
            for a, b, v in y.stored_entries():
                yield f"y {a.i} {a.s} {a.j} {b.i} {b.s} {b.j} {format_fraction(v)}"

    return write_lines_atomic(path, lines())


def _ints(fields: Iterable[str], line_number: int) -> list[int]:
    try:
        return [int(f) for f in fields]
    except ValueError as e:
        raise InstanceFormatError(f"bad index in {' '.join(fields)!r}", line_number) from e


def _value(text: str, line_number: int) -> Fraction:
    try:
        v = parse_fraction(text)
    except ValueError as e:
        raise InstanceFormatError(str(e), line_number) from e
    if v < 0:
        raise InstanceFormatError(f"negative value {text}", line_number)
    return v


def load_certificate(path: Path) -> tuple[SparseFlow, ConditionalFlowSet | None]:
    """Read a certificate written by ``write_certificate``, line by line."""
    flow_constant: Fraction | None = None
    x_entries: dict[StageArc, Fraction] = {}
    y_entries: dict[StageArc, dict[StageArc, Fraction]] = defaultdict(dict)
    with open(path, encoding="utf-8") as f:
        for number, raw in enumerate(f, start=1):
            text = raw.split("#", 1)[0].strip()
            if not text:
                continue
            if text.startswith("F="):
                if flow_constant is not None:
                    raise InstanceFormatError("duplicate F header", number)
                flow_constant = _value(text[2:], number)
                continue
            if flow_constant is None:
                raise InstanceFormatError("certificate must start with F=<num>/<den>", number)
            kind, *fields = text.split()
            if kind == "x" and len(fields) == 4:
                a = StageArc(*_ints(fields[:3], number))
                if a in x_entries:
                    raise InstanceFormatError(f"duplicate x entry {a.label()}", number)
                x_entries[a] = _value(fields[3], number)
            elif kind == "y" and len(fields) == 7:
                idx = _ints(fields[:6], number)
                a, b = StageArc(*idx[:3]), StageArc(*idx[3:])
                if b in y_entries[a]:
                    raise InstanceFormatError(f"duplicate y entry {a.label()}{b.label()}", number)
                y_entries[a][b] = _value(fields[6], number)
            else:
                raise InstanceFormatError(f"unrecognised line {text!r}", number)
    if flow_constant is None or flow_constant == 0:
        raise InstanceFormatError("missing or zero F header")
    x = SparseFlow(x_entries, flow_constant)
    y = ConditionalFlowSet(x, LiftRule.EXPLICIT, explicit=y_entries) if y_entries else None
    logger.info(f"Loaded certificate {path}: {len(x)} x entries")
    return x, y
