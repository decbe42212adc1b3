"""Exact verification of a certificate and the refutation verdict."""

from collections import defaultdict
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction
from itertools import product
import logging
from typing import NamedTuple

from .certificate import (
    CertificateDiagnostics,
    ConditionalFlowSet,
    SparseFlow,
    certificate_objective,
    check_integer_mode,
)
from .errors import CertificateError, VerdictError
from .lp_model import (
    DEFAULT_FULL_MODEL_MAX_NODES,
    VariableIndex,
    build_base_rows,
    build_family_rows,
    evaluate_row,
    row_count,
)
from .models import (
    ALL_FAMILIES,
    ConstraintFamily,
    FamilyResidual,
    HcpInstance,
    IntegralBound,
    RefutationVerdict,
    StageArc,
    SymmetryReport,
    TourResult,
    TspInstance,
    Variable,
    Verdict,
    YVar,
    format_fraction,
)
from .oracles import path_cover_large_arc_bound

logger = logging.getLogger(__name__)

ZERO = Fraction(0)
DEFAULT_WITNESS_CAP = 10
NO_LARGE_SUPPORT = "no-large-support"
ANCHOR_FAMILIES = (
    ConstraintFamily.C7,
    ConstraintFamily.C8,
    ConstraintFamily.C9,
    ConstraintFamily.C10,
    ConstraintFamily.C11,
    ConstraintFamily.C12,
    ConstraintFamily.C14,
)


class _Tally:
    """Running residual statistics for one family."""

    def __init__(self, family: ConstraintFamily, witness_cap: int):
        self.family = family
        self.witness_cap = witness_cap
        self.violations = 0
        self.max_abs = ZERO
        self.l1 = ZERO
        self.witnesses: list[tuple[str, Fraction]] = []

    def add(self, name: str, residual: Fraction) -> None:
        if residual == 0:
            return
        self.violations += 1
        self.l1 += abs(residual)
        self.max_abs = max(self.max_abs, abs(residual))
        if len(self.witnesses) < self.witness_cap:
            self.witnesses.append((name, residual))

    def merge(self, other: "_Tally") -> None:
        self.violations += other.violations
        self.l1 += other.l1
        self.max_abs = max(self.max_abs, other.max_abs)
        room = self.witness_cap - len(self.witnesses)
        self.witnesses.extend(other.witnesses[: max(room, 0)])

    def result(self, rows_checked: int) -> FamilyResidual:
        return FamilyResidual(
            family=self.family,
            rows_checked=rows_checked,
            violations=self.violations,
            max_abs_residual=self.max_abs,
            residual_l1=self.l1,
            witnesses=self.witnesses,
        )


def _x_value(x: SparseFlow, v: Variable) -> Fraction:
    return x.get(v) if isinstance(v, StageArc) else ZERO


def _verify_base(x: SparseFlow, t: TspInstance, tally: _Tally) -> None:
    for row in build_base_rows(t, x.flow_constant):
        tally.add(row.name, evaluate_row(row, lambda v: _x_value(x, v)))


def _verify_invalid_x(x: SparseFlow, idx: VariableIndex, tally: _Tally) -> None:
    for a in x.support:
        if a not in idx.valid:
            tally.add(f"C13[x={a.label()}]", x.get(a))


def _verify_anchor(
    a: StageArc,
    flow: dict[StageArc, Fraction],
    xa: Fraction,
    idx: VariableIndex,
    tallies: dict[ConstraintFamily, _Tally],
) -> None:
    """Every per-anchor family row of anchor a, in row order."""
    n = idx.n
    p = a.s
    conservation: dict[tuple[int, int], Fraction] = defaultdict(Fraction)
    stage_total: dict[int, Fraction] = defaultdict(Fraction)
    visits: dict[int, Fraction] = defaultdict(Fraction)
    inadmissible: list[tuple[StageArc, Fraction]] = []
    for b, v in flow.items():
        if not idx.admissible(a, b):
            inadmissible.append((b, v))
            continue
        if b.s <= n - 1:
            conservation[(b.j, b.s)] += v
        if b.s >= 2:
            conservation[(b.i, b.s - 1)] -= v
        stage_total[b.s] += v
        visits[b.j] += v

    label = a.label()
    if ConstraintFamily.C7 in tallies or ConstraintFamily.C8 in tallies:
        for (k, s), r in sorted(conservation.items()):
            family = ConstraintFamily.C7 if s >= p else ConstraintFamily.C8
            if family in tallies:
                tallies[family].add(f"{family}[a={label},k={k},s={s}]", r)
    for family, stages in (
        (ConstraintFamily.C9, range(p + 1, n + 1)),
        (ConstraintFamily.C10, range(1, p)),
    ):
        if family in tallies:
            for s in stages:
                tallies[family].add(f"{family}[a={label},s={s}]", stage_total[s] - xa)
    if ConstraintFamily.C11 in tallies:
        for k in range(1, n + 1):
            tallies[ConstraintFamily.C11].add(f"C11[a={label},k={k}]", visits[k] - xa)
    if ConstraintFamily.C12 in tallies:
        tallies[ConstraintFamily.C12].add(f"C12[a={label}]", flow.get(a, ZERO) - xa)
    if ConstraintFamily.C14 in tallies:
        for b, v in sorted(inadmissible):
            tallies[ConstraintFamily.C14].add(f"C14[a={label},b={b.label()}]", v)


def _verify_chunk(
    anchors: Sequence[StageArc],
    x: SparseFlow,
    y: ConditionalFlowSet,
    idx: VariableIndex,
    families: Sequence[ConstraintFamily],
    witness_cap: int,
) -> tuple[dict[ConstraintFamily, _Tally], dict[StageArc, Fraction], dict[StageArc, Fraction]]:
    tallies = {f: _Tally(f, witness_cap) for f in families if f in ANCHOR_FAMILIES}
    c6_in: dict[StageArc, Fraction] = defaultdict(Fraction)
    c6_out: dict[StageArc, Fraction] = defaultdict(Fraction)
    for count, a in enumerate(anchors, start=1):
        flow = y.flow(a)
        _verify_anchor(a, flow, x.get(a), idx, tallies)
        if a.s == 1:
            for b, v in flow.items():
                if b.s == 2 and b in idx.valid:
                    c6_in[b] += v
        elif a.s == 2:
            for c, v in flow.items():
                if c.s == 3 and c in idx.valid:
                    c6_out[a] += v
        if count % 500 == 0:
            logger.debug(f"Verified {count}/{len(anchors)} anchors in chunk")
    return tallies, c6_in, c6_out


def verify_families(
    x: SparseFlow,
    y: ConditionalFlowSet | None,
    t: TspInstance,
    families: Iterable[ConstraintFamily | str] = ALL_FAMILIES,
    witness_cap: int = DEFAULT_WITNESS_CAP,
    threads: int = 1,
    anchors: Iterable[StageArc] | None = None,
) -> dict[ConstraintFamily, FamilyResidual]:
    """Stream every requested family in one pass over the anchors.

    Only rows that touch a non-zero value are evaluated; ``rows_checked``
    is the full combinatorial row count. ``anchors`` restricts the y pass.
    y families are skipped when no lift is given.
    """
    wanted = {ConstraintFamily(f) for f in families}
    selected = [f for f in ALL_FAMILIES if f in wanted]
    if y is None and any(f.uses_y for f in selected):
        logger.warning("No conditional flows given; verifying x families only")
        selected = [f for f in selected if not f.uses_y]
    idx = VariableIndex(t)
    results: dict[ConstraintFamily, FamilyResidual] = {}

    if ConstraintFamily.BASE in selected:
        tally = _Tally(ConstraintFamily.BASE, witness_cap)
        _verify_base(x, t, tally)
        results[ConstraintFamily.BASE] = tally.result(row_count(t, ConstraintFamily.BASE, idx))

    y_families = [f for f in selected if f.uses_y]
    if y is not None and y_families:
        if anchors is None:
            pool = set(x.support) | set(y.anchors())
        else:
            pool = set(anchors)
        ordered = sorted(a for a in pool if a in idx.valid)
        workers = max(1, min(threads, len(ordered)))
        size = -(-len(ordered) // workers) if ordered else 0
        chunks = [ordered[i : i + size] for i in range(0, len(ordered), size)] if size else [[]]
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(
                executor.map(
                    lambda chunk: _verify_chunk(chunk, x, y, idx, y_families, witness_cap),
                    chunks,
                )
            )
        merged = {f: _Tally(f, witness_cap) for f in y_families}
        c6_in: dict[StageArc, Fraction] = defaultdict(Fraction)
        c6_out: dict[StageArc, Fraction] = defaultdict(Fraction)
        for tallies, part_in, part_out in parts:
            for f, tally in tallies.items():
                merged[f].merge(tally)
            for b, v in part_in.items():
                c6_in[b] += v
            for b, v in part_out.items():
                c6_out[b] += v
        if ConstraintFamily.C6 in merged:
            c6 = merged[ConstraintFamily.C6]
            c6.add("C6[total]", sum(c6_in.values(), ZERO) - x.flow_constant)
            for b in idx.by_stage.get(2, []):
                c6.add(f"C6[b={b.label()}]", c6_in[b] - c6_out[b])
        for f in y_families:
            results[f] = merged[f].result(row_count(t, f, idx))

    if ConstraintFamily.C13 in selected:
        tally = _Tally(ConstraintFamily.C13, witness_cap)
        _verify_invalid_x(x, idx, tally)
        results[ConstraintFamily.C13] = tally.result(row_count(t, ConstraintFamily.C13, idx))

    ordered_results = {f: results[f] for f in ALL_FAMILIES if f in results}
    for result in ordered_results.values():
        logger.info(result.line())
    return ordered_results


def verify_family_materialized(
    x: SparseFlow,
    y: ConditionalFlowSet | None,
    t: TspInstance,
    family: ConstraintFamily | str,
    witness_cap: int = DEFAULT_WITNESS_CAP,
    max_nodes: int = DEFAULT_FULL_MODEL_MAX_NODES,
) -> FamilyResidual:
    """Evaluate every generated row of one family."""
    family = ConstraintFamily(family)

    def value(v: Variable) -> Fraction:
        if isinstance(v, YVar):
            return y.entry(v.anchor, v.probe) if y is not None else ZERO
        return x.get(v)

    tally = _Tally(family, witness_cap)
    rows = 0
    for row in build_family_rows(t, family, x.flow_constant, max_nodes):
        rows += 1
        tally.add(row.name, evaluate_row(row, value))
    return tally.result(rows)


def verify_family(
    x: SparseFlow,
    y: ConditionalFlowSet | None,
    t: TspInstance,
    family: ConstraintFamily | str,
    witness_cap: int = DEFAULT_WITNESS_CAP,
    materialize: bool = False,
    max_nodes: int = DEFAULT_FULL_MODEL_MAX_NODES,
) -> FamilyResidual:
    """One family's residuals, streamed or from materialised rows."""
    family = ConstraintFamily(family)
    if materialize:
        return verify_family_materialized(x, y, t, family, witness_cap, max_nodes)
    results = verify_families(x, y, t, [family], witness_cap)
    if family not in results:
        raise ValueError(f"{family} needs conditional flows")
    return results[family]


def large_support_check(x: SparseFlow, t: TspInstance) -> list[StageArc]:
    """Support entries priced at LARGE."""
    return [a for a in x.support if a.i != a.j and t.is_large(a.i, a.j)]


def _min_small_cost(t: TspInstance) -> int:
    costs = [t.cost_of(i, j) for i in t.nodes for j in t.nodes if i != j and not t.is_large(i, j)]
    return min(costs, default=t.large)


def _large_count_bound(t: TspInstance, m: int) -> Fraction:
    m = min(m, t.n)
    return Fraction(m * t.large + (t.n - m) * _min_small_cost(t))


def bound_from_tour(t: TspInstance, tour: TourResult) -> IntegralBound:
    """The integral optimum itself, from a proven-optimal tour of t."""
    if not tour.optimal:
        raise VerdictError("Tour is not proven optimal")
    if len(tour.order) != t.n:
        raise VerdictError(f"Tour has {len(tour.order)} nodes, instance has {t.n}")
    return IntegralBound(
        value=Fraction(tour.value),
        provenance=[f"exact optimum {tour.value} ({tour.method or 'oracle'})"],
        exact=True,
    )


def bound_from_seed(t: TspInstance, seed_tour: TourResult) -> IntegralBound:
    """Large arcs of the seed optimum carry over to every enlargement.

    Any tour of t then pays m LARGE arcs plus at least the cheapest small
    cost on the remaining n - m arcs.
    """
    if not seed_tour.optimal:
        raise VerdictError("Seed tour is not proven optimal")
    m = seed_tour.large_arc_count
    value = _large_count_bound(t, m)
    return IntegralBound(
        value=value,
        provenance=[
            f"seed optimum {seed_tour.value} with {m} large arcs + enlargement invariance: {value}"
        ],
    )


def bound_from_cut(t: TspInstance, seed: HcpInstance) -> IntegralBound:
    """Large arcs forced by the path-cover argument on the seed graph."""
    m = path_cover_large_arc_bound(seed)
    value = _large_count_bound(t, m)
    return IntegralBound(
        value=value,
        provenance=[f"path-cover cut: at least {m} large arcs: {value}"],
    )


def combine_bounds(bounds: Iterable[IntegralBound]) -> IntegralBound:
    """Strongest bound, keeping the provenance of every source."""
    bounds = list(bounds)
    if not bounds:
        raise VerdictError("No integral bound supplied")
    best = max(b.value for b in bounds)
    return IntegralBound(
        value=best,
        provenance=[p for b in bounds for p in b.provenance],
        exact=any(b.exact and b.value == best for b in bounds),
    )


def full_verdict(
    x: SparseFlow,
    y: ConditionalFlowSet | None,
    t: TspInstance,
    bound: IntegralBound | None,
    results: dict[ConstraintFamily, FamilyResidual] | None = None,
    witness_cap: int = DEFAULT_WITNESS_CAP,
    threads: int = 1,
) -> RefutationVerdict:
    """Compare the certificate's objective with the integral bound."""
    if bound is None or not bound.provenance:
        raise VerdictError("Integral bound has no oracle provenance")
    if results is None:
        results = verify_families(x, y, t, witness_cap=witness_cap, threads=threads)
    summary = certificate_objective(x, t)
    checked = list(results)
    satisfied = [f for f, r in results.items() if r.satisfied]
    unchecked = [f for f in ALL_FAMILIES if f not in results]
    notes = []
    large = large_support_check(x, t)
    if large:
        notes.append(f"{NO_LARGE_SUPPORT}: {len(large)} LARGE arcs in support")
    if y is None:
        notes.append("scope: x families only")
    if unchecked:
        notes.append(f"unchecked: {','.join(unchecked)}")
    if summary.value >= bound.value:
        verdict = Verdict.DOES_NOT_REFUTE
    elif not unchecked and len(satisfied) == len(checked):
        verdict = Verdict.REFUTES
    else:
        verdict = Verdict.PARTIAL
        if all(f in satisfied for f in checked if not f.uses_y):
            notes.append("x-level scope (BASE, C13): all satisfied below the bound")
    result = RefutationVerdict(
        certificate_objective=summary.value,
        max_support_cost=summary.max_support_cost,
        integral_bound=bound,
        gap=bound.value - summary.value,
        families_checked=checked,
        families_satisfied=satisfied,
        verdict=verdict,
        notes=notes,
    )
    logger.info(f"Verdict {result.label}: objective {summary.value} vs bound {bound.value}")
    return result


class MutationOutcome(NamedTuple):
    target: str
    description: str
    flagged: list[str]
    skipped: bool = False

    @property
    def detected(self) -> bool:
        return not self.skipped and self.target in self.flagged


class MutationReport(NamedTuple):
    outcomes: list[MutationOutcome]

    @property
    def skipped(self) -> list[str]:
        return [o.target for o in self.outcomes if o.skipped]

    @property
    def missed(self) -> list[str]:
        """Applied perturbations their own family did not flag."""
        return [o.target for o in self.outcomes if not o.skipped and not o.detected]

    @property
    def full_diagonal(self) -> bool:
        """Every catalog perturbation was applied and flagged by its family."""
        return all(o.detected for o in self.outcomes)

    def lines(self) -> list[str]:
        return [
            f"mutation={o.target} "
            + ("skipped" if o.skipped else f"detected={'yes' if o.detected else 'no'}")
            + f" flagged={','.join(o.flagged) or '-'} # {o.description}"
            for o in self.outcomes
        ] + [
            f"mutations full_diagonal={'yes' if self.full_diagonal else 'no'} "
            f"skipped={','.join(self.skipped) or '-'} missed={','.join(self.missed) or '-'}"
        ]


def _fingerprint(
    x: SparseFlow,
    y: ConditionalFlowSet,
    t: TspInstance,
    anchors: list[StageArc],
) -> dict[str, tuple[int, Fraction]]:
    results = verify_families(x, y, t, anchors=anchors)
    prints = {str(f): (r.violations, r.residual_l1) for f, r in results.items()}
    prints[NO_LARGE_SUPPORT] = (len(large_support_check(x, t)), ZERO)
    return prints


def _pick(flow: dict[StageArc, Fraction], predicate) -> StageArc | None:
    return next((b for b in sorted(flow) if predicate(b)), None)


def mutation_suite(
    x: SparseFlow,
    y: ConditionalFlowSet,
    t: TspInstance,
    delta: Fraction | int = 1,
    integer_mode: bool = False,
) -> MutationReport:
    """Apply one targeted perturbation per family and record what flags it.

    Each perturbation is checked against the unperturbed certificate on the
    anchors it touches; a family flags it when its violation count or total
    residual changes. Integer mode needs an integral x and an integral delta.
    """
    delta = Fraction(delta)
    if integer_mode:
        check_integer_mode(x)
        if delta.denominator != 1:
            raise CertificateError(f"Integer mode needs an integral delta, got {delta}")
    idx = VariableIndex(t)
    n = t.n
    support = [a for a in x.support if a in idx.valid]
    outcomes: list[MutationOutcome] = []

    def run(target: str, description: str, x2: SparseFlow, y2: ConditionalFlowSet, anchors) -> None:
        anchors = sorted(set(anchors))
        before = _fingerprint(x, y, t, anchors)
        after = _fingerprint(x2, y2, t, anchors)
        flagged = [k for k in after if before.get(k) != after[k]]
        outcomes.append(MutationOutcome(target, description, flagged))
        logger.info(f"Mutation {target}: flagged by {','.join(flagged) or 'nothing'}")

    def skip(target: str, description: str) -> None:
        outcomes.append(MutationOutcome(target, description, [], skipped=True))
        logger.warning(f"Mutation {target} skipped: {description}")

    a = next((a for a in support if a.s == 2), None)
    if a is None:
        skip("BASE", "no stage-2 support")
    else:
        run("BASE", f"x{a.label()} += {delta}", x.with_value(a, x.get(a) + delta), y, [a])

    self_loop = StageArc(2, 2, 2) if n >= 2 else StageArc(1, 1, 1)
    run("C13", f"x{self_loop.label()} = {delta}", x.with_value(self_loop, delta), y, [])

    flows: dict[StageArc, dict[StageArc, Fraction]] = {}

    def anchor_with(predicate) -> tuple[StageArc, StageArc] | None:
        for a in support:
            flow = flows.setdefault(a, y.flow(a))
            b = _pick(flow, lambda b: predicate(a, b))
            if b is not None:
                return a, b
        return None

    def bump(target: str, found, text: str) -> None:
        if found is None:
            skip(target, f"no anchor with {text}")
            return
        a, b = found
        value = y.entry(a, b) + delta
        run(target, f"y{a.label()}{b.label()} += {delta}", x, y.with_entry(a, b, value), [a])

    def remove(target: str, found, text: str) -> None:
        if found is None:
            skip(target, f"no anchor with {text}")
            return
        a, b = found
        run(target, f"y{a.label()}{b.label()} = 0", x, y.with_entry(a, b, 0), [a])

    bump("C7", anchor_with(lambda a, b: b.s > a.s), "a later-stage entry")
    bump("C8", anchor_with(lambda a, b: b.s < a.s), "an earlier-stage entry")
    remove("C9", anchor_with(lambda a, b: b.s > a.s), "a later-stage entry")
    remove("C10", anchor_with(lambda a, b: b.s < a.s), "an earlier-stage entry")
    bump("C11", anchor_with(lambda a, b: b.s > a.s), "a later-stage entry")

    if support:
        a = support[0]
        y2 = y.with_entry(a, a, y.entry(a, a) + delta)
        run("C12", f"y{a.label()}{a.label()} += {delta}", x, y2, [a])
    else:
        skip("C12", "empty support")

    same_stage = next(
        ((a, b) for a in support for b in idx.by_stage.get(a.s, []) if b != a), None
    )
    if same_stage is None:
        skip("C14", "no stage with two valid arcs")
    else:
        a, b = same_stage
        run("C14", f"y{a.label()}{b.label()} = {delta}", x, y.with_entry(a, b, delta), [a])

    first = next((a for a in support if a.s == 1), None)
    second = idx.by_stage.get(2, [])
    if first is None or not second:
        skip("C6", "no stage-1 anchor or stage-2 arc")
    else:
        b = second[0]
        y2 = y.with_entry(first, b, y.entry(first, b) + delta)
        run("C6", f"y{first.label()}{b.label()} += {delta}", x, y2, [first])

    large = next(
        (StageArc(*c) for c in product(t.nodes, repeat=3) if c in idx.valid and t.is_large(c[0], c[2])),
        None,
    )
    if large is None:
        skip(NO_LARGE_SUPPORT, "no LARGE valid arc")
    else:
        run(
            NO_LARGE_SUPPORT,
            f"x{large.label()} = {delta}",
            x.with_value(large, x.get(large) + delta),
            y,
            [large],
        )
    return MutationReport(outcomes)


def render_report(
    verdict: RefutationVerdict,
    results: dict[ConstraintFamily, FamilyResidual],
    symmetry: SymmetryReport | None = None,
    extra: Iterable[str] = (),
    diagnostics: CertificateDiagnostics | None = None,
) -> tuple[list[str], list[str]]:
    """Human-readable lines and machine-readable lines for a verdict."""
    text = [
        f"Verdict: {verdict.label}",
        f"Certificate objective (per unit flow): {verdict.certificate_objective}",
        f"Max support cost: {verdict.max_support_cost}",
        f"Integral bound: {verdict.integral_bound.value}"
        + (" (exact)" if verdict.integral_bound.exact else " (lower bound)"),
    ]
    text += [f"  provenance: {p}" for p in verdict.integral_bound.provenance]
    text.append(f"Gap: {verdict.gap}")
    text.append("Families:")
    for f, r in results.items():
        status = "ok" if r.satisfied else f"{r.violations} violations, max {r.max_abs_residual}"
        text.append(f"  {f:<5} rows={r.rows_checked:<10} {status}  # {f.description}")
        text += [f"      {name}: {value}" for name, value in r.witnesses]
    if symmetry is not None:
        text.append(
            f"Symmetry: {symmetry.pairs_checked} pairs, max asymmetry {symmetry.max_asymmetry}"
        )
    if diagnostics is not None:
        text.append("Diagnostics:")
        text += [f"  {line}" for line in diagnostics.lines()]
    text += [f"Note: {note}" for note in verdict.notes]
    text += list(extra)

    machine = [r.line() for r in results.values()]
    machine.append(
        f"verdict={verdict.label} objective={format_fraction(verdict.certificate_objective)} "
        f"bound={format_fraction(verdict.integral_bound.value)} "
        f"gap={format_fraction(verdict.gap)} max_support_cost={verdict.max_support_cost}"
    )
    if symmetry is not None:
        machine.append(
            f"symmetry pairs={symmetry.pairs_checked} max={format_fraction(symmetry.max_asymmetry)}"
        )
    if diagnostics is not None:
        machine.append(diagnostics.machine_line())
    return text, machine


def family_matrix(
    runs: dict[str, dict[ConstraintFamily, FamilyResidual]],
) -> list[str]:
    """Per-family status across runs (e.g. stage plans), one line per family."""
    names = list(runs)
    lines = ["family " + " ".join(f"{name:>16}" for name in names)]
    for f in ALL_FAMILIES:
        cells = []
        for name in names:
            r = runs[name].get(f)
            if r is None:
                cells.append("-")
            elif r.satisfied:
                cells.append("ok")
            else:
                cells.append(f"FAIL({r.violations})")
        lines.append(f"{f:<6} " + " ".join(f"{c:>16}" for c in cells))
    return lines
