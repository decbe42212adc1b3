"""Variable indexing and constraint families of the staged-flow relaxation.

* BASE: F leaves the origin at stage 1, inflow at stage s equals outflow at
  stage s + 1 for every node, F returns to the origin at stage n.
* C6: y summed over stage-1 x stage-2 pairs equals F, and every stage-2 arc
  passes on to stage 3 what it receives from stage 1.
* C7/C8: per anchor, conditional conservation at every node on the stages
  after (C7) or before (C8) the anchor.
* C9/C10: per anchor, the conditional total of every other stage equals
  x(anchor).
* C11: per anchor, the conditional inflow into every node equals x(anchor).
* C12: z collapses onto y, leaving y(a, a) = x(a).
* C13/C14: invalid variables are zero.

Rows are indexed combinatorially: every index tuple yields a row even when
none of its variables exist, so row counts are known without generating.
"""

from collections import defaultdict
from collections.abc import Callable, Iterable, Iterator
from fractions import Fraction
from itertools import product
import logging
import os
from pathlib import Path
import tempfile
from typing import TYPE_CHECKING

import pulp

from .artifacts import write_lines_atomic
from .errors import ModelSizeError
from .models import (
    ConstraintFamily,
    LinearRow,
    Relation,
    StageArc,
    SymmetryReport,
    TspInstance,
    Variable,
    YVar,
    format_fraction,
    variable_name,
    variable_sort_key,
)

if TYPE_CHECKING:
    from .certificate import ConditionalFlowSet

logger = logging.getLogger(__name__)

DEFAULT_FULL_MODEL_MAX_NODES = 12
X_ONLY = "x-only"
FULL = "full"


def is_valid_arc(t: TspInstance, i: int, s: int, j: int) -> bool:
    """Validity filter for x(i, s, j).

    Stage 1 is exactly the origin's out-arcs, arcs enter the origin only at
    stage n, and the sink only leaves towards the origin at stage n.
    """
    n = t.n
    if not (1 <= i <= n and 1 <= j <= n and 1 <= s <= n) or i == j:
        return False
    if (s == 1) != (i == t.origin):
        return False
    if (j == t.origin) != (s == n):
        return False
    if t.sink is not None and i == t.sink:
        return j == t.origin and s == n
    return True


def enumerate_x_variables(t: TspInstance, exclude_large: bool = False) -> list[StageArc]:
    """All valid x indices in lexicographic (i, s, j) order."""
    return [
        StageArc(i, s, j)
        for i, s, j in product(t.nodes, repeat=3)
        if is_valid_arc(t, i, s, j) and not (exclude_large and t.is_large(i, j))
    ]


class VariableIndex:
    """Valid x indices grouped by stage, head and tail."""

    def __init__(self, t: TspInstance):
        self.t = t
        self.n = t.n
        self.arcs = enumerate_x_variables(t)
        self.valid = frozenset(self.arcs)
        self.by_stage: dict[int, list[StageArc]] = defaultdict(list)
        self.into: dict[tuple[int, int], list[StageArc]] = defaultdict(list)
        self.out_of: dict[tuple[int, int], list[StageArc]] = defaultdict(list)
        for a in self.arcs:
            self.by_stage[a.s].append(a)
            self.into[(a.j, a.s)].append(a)
            self.out_of[(a.i, a.s)].append(a)

    def admissible(self, anchor: StageArc, probe: StageArc) -> bool:
        """y(anchor, probe) may be non-zero."""
        return probe in self.valid and (probe.s != anchor.s or probe == anchor)

    def stage_count(self, s: int) -> int:
        return len(self.by_stage.get(s, ()))


def _row(
    name: str,
    family: ConstraintFamily,
    terms: Iterable[tuple[Variable, Fraction | int]],
    rhs: Fraction | int = 0,
) -> LinearRow:
    merged: dict[Variable, Fraction] = defaultdict(Fraction)
    for var, coef in terms:
        merged[var] += Fraction(coef)
    canonical = tuple(
        (v, c)
        for v, c in sorted(merged.items(), key=lambda item: variable_sort_key(item[0]))
        if c != 0
    )
    return LinearRow(name, family, canonical, Relation.EQ, Fraction(rhs))


def build_base_rows(t: TspInstance, flow_constant: Fraction | int = 1) -> list[LinearRow]:
    """x-level flow rows (family BASE)."""
    idx = VariableIndex(t)
    F = Fraction(flow_constant)
    B = ConstraintFamily.BASE
    rows = [_row("BASE[origin]", B, ((a, 1) for a in idx.out_of[(t.origin, 1)]), F)]
    for k in t.nodes:
        for s in range(1, t.n):
            terms = [(a, 1) for a in idx.into[(k, s)]]
            terms += [(a, -1) for a in idx.out_of[(k, s + 1)]]
            rows.append(_row(f"BASE[k={k},s={s}]", B, terms))
    rows.append(_row("BASE[return]", B, ((a, 1) for a in idx.into[(t.origin, t.n)]), F))
    return rows


def _c6_rows(idx: VariableIndex, F: Fraction) -> Iterator[LinearRow]:
    C6 = ConstraintFamily.C6
    first, second, third = (idx.by_stage.get(s, []) for s in (1, 2, 3))
    yield _row("C6[total]", C6, ((YVar(a, b), 1) for a in first for b in second), F)
    for b in second:
        terms = [(YVar(a, b), 1) for a in first]
        terms += [(YVar(b, c), -1) for c in third]
        yield _row(f"C6[b={b.label()}]", C6, terms)


def _conservation_rows(idx: VariableIndex, family: ConstraintFamily) -> Iterator[LinearRow]:
    n = idx.n
    for a in idx.arcs:
        stages = range(a.s, n) if family is ConstraintFamily.C7 else range(1, min(a.s, n))
        for k in idx.t.nodes:
            for s in stages:
                terms = [(YVar(a, b), 1) for b in idx.into[(k, s)] if idx.admissible(a, b)]
                terms += [
                    (YVar(a, b), -1) for b in idx.out_of[(k, s + 1)] if idx.admissible(a, b)
                ]
                yield _row(f"{family}[a={a.label()},k={k},s={s}]", family, terms)


def _stage_total_rows(idx: VariableIndex, family: ConstraintFamily) -> Iterator[LinearRow]:
    for a in idx.arcs:
        stages = range(a.s + 1, idx.n + 1) if family is ConstraintFamily.C9 else range(1, a.s)
        for s in stages:
            terms: list[tuple[Variable, int]] = [(YVar(a, b), 1) for b in idx.by_stage.get(s, [])]
            terms.append((a, -1))
            yield _row(f"{family}[a={a.label()},s={s}]", family, terms)


def _visit_rows(idx: VariableIndex) -> Iterator[LinearRow]:
    C11 = ConstraintFamily.C11
    for a in idx.arcs:
        for k in idx.t.nodes:
            terms: list[tuple[Variable, int]] = [
                (YVar(a, b), 1)
                for s in range(1, idx.n + 1)
                for b in idx.into[(k, s)]
                if idx.admissible(a, b)
            ]
            terms.append((a, -1))
            yield _row(f"C11[a={a.label()},k={k}]", C11, terms)


def _diagonal_rows(idx: VariableIndex) -> Iterator[LinearRow]:
    # z rows collapse onto y and are identical to these after substitution.
    for a in idx.arcs:
        yield _row(f"C12[a={a.label()}]", ConstraintFamily.C12, [(YVar(a, a), 1), (a, -1)])


def _invalid_x_rows(idx: VariableIndex) -> Iterator[LinearRow]:
    for b in product(idx.t.nodes, repeat=3):
        if b not in idx.valid:
            arc = StageArc(*b)
            yield _row(f"C13[x={arc.label()}]", ConstraintFamily.C13, [(arc, 1)])


def _invalid_y_rows(idx: VariableIndex) -> Iterator[LinearRow]:
    for a in idx.arcs:
        for b in product(idx.t.nodes, repeat=3):
            probe = StageArc(*b)
            if not idx.admissible(a, probe):
                yield _row(
                    f"C14[a={a.label()},b={probe.label()}]",
                    ConstraintFamily.C14,
                    [(YVar(a, probe), 1)],
                )


def build_family_rows(
    t: TspInstance,
    family: ConstraintFamily | str,
    flow_constant: Fraction | int = 1,
    max_nodes: int = DEFAULT_FULL_MODEL_MAX_NODES,
) -> Iterator[LinearRow]:
    """Lazily yield one family's rows in deterministic order.

    Families over y are materialised only up to ``max_nodes`` nodes.
    """
    family = ConstraintFamily(family)
    if family.uses_y and t.n > max_nodes:
        raise ModelSizeError(
            f"{family} rows for n={t.n} exceed the materialisation cap of {max_nodes}"
        )
    if family is ConstraintFamily.BASE:
        yield from build_base_rows(t, flow_constant)
        return
    idx = VariableIndex(t)
    match family:
        case ConstraintFamily.C6:
            yield from _c6_rows(idx, Fraction(flow_constant))
        case ConstraintFamily.C7 | ConstraintFamily.C8:
            yield from _conservation_rows(idx, family)
        case ConstraintFamily.C9 | ConstraintFamily.C10:
            yield from _stage_total_rows(idx, family)
        case ConstraintFamily.C11:
            yield from _visit_rows(idx)
        case ConstraintFamily.C12:
            yield from _diagonal_rows(idx)
        case ConstraintFamily.C13:
            yield from _invalid_x_rows(idx)
        case ConstraintFamily.C14:
            yield from _invalid_y_rows(idx)


def row_count(t: TspInstance, family: ConstraintFamily | str, idx: VariableIndex | None = None) -> int:
    """Number of rows ``build_family_rows`` yields, without generating them."""
    family = ConstraintFamily(family)
    idx = idx or VariableIndex(t)
    n = t.n
    cube = n**3
    total = len(idx.arcs)
    stage = [a.s for a in idx.arcs]
    match family:
        case ConstraintFamily.BASE:
            return 2 + n * (n - 1)
        case ConstraintFamily.C6:
            return 1 + idx.stage_count(2)
        case ConstraintFamily.C7:
            return sum(n * (n - p) for p in stage)
        case ConstraintFamily.C8:
            return sum(n * (p - 1) for p in stage)
        case ConstraintFamily.C9:
            return sum(n - p for p in stage)
        case ConstraintFamily.C10:
            return sum(p - 1 for p in stage)
        case ConstraintFamily.C11:
            return total * n
        case ConstraintFamily.C12:
            return total
        case ConstraintFamily.C13:
            return cube - total
        case ConstraintFamily.C14:
            return sum(cube - total + idx.stage_count(p) - 1 for p in stage)
    raise ValueError(f"Unknown family: {family}")


def format_row(row: LinearRow) -> str:
    """``family|lhs-terms|relation|rhs`` dump line."""
    terms = " ".join(
        f"{'+' if c > 0 else '-'}{format_fraction(abs(c))}*{variable_name(v)}"
        for v, c in row.terms
    )
    return f"{row.family}|{terms or '0'}|{row.relation}|{format_fraction(row.rhs)}"


def write_row_dump(rows: Iterable[LinearRow], path: Path) -> Path:
    """One row per line for external auditing."""
    return write_lines_atomic(path, (format_row(r) for r in rows))


def export_lp(
    t: TspInstance,
    families: Iterable[ConstraintFamily | str],
    path: Path,
    mode: str = X_ONLY,
    flow_constant: Fraction | int = 1,
    max_nodes: int = DEFAULT_FULL_MODEL_MAX_NODES,
) -> Path:
    """Write the model in LP format: minimise staged cost subject to ``families``.

    Rows without variables are left out; coefficients are written as floats.
    """
    selected = sorted({ConstraintFamily(f) for f in families}, key=list(ConstraintFamily).index)
    if mode == FULL:
        if t.n > max_nodes:
            raise ModelSizeError(f"Full export for n={t.n} exceeds cap {max_nodes}")
    elif mode == X_ONLY:
        dropped = [f for f in selected if f.uses_y]
        if dropped:
            logger.warning(f"x-only export skips y families: {', '.join(dropped)}")
        selected = [f for f in selected if not f.uses_y]
    else:
        raise ValueError(f"Unknown export mode: {mode}")

    prob = pulp.LpProblem("staged_flow", pulp.LpMinimize)
    variables: dict[Variable, pulp.LpVariable] = {}

    def var(v: Variable) -> pulp.LpVariable:
        if v not in variables:
            variables[v] = pulp.LpVariable(variable_name(v), lowBound=0)
        return variables[v]

    prob += pulp.lpSum(t.cost_of(a.i, a.j) * var(a) for a in enumerate_x_variables(t))
    skipped = 0
    for family in selected:
        for index, row in enumerate(build_family_rows(t, family, flow_constant, max_nodes)):
            if not row.terms:
                skipped += 1
                continue
            expr = pulp.lpSum(float(c) * var(v) for v, c in row.terms)
            prob += (expr == float(row.rhs), f"{family}_{index}")
    logger.info(
        f"Exporting {len(prob.constraints)} rows over {len(variables)} variables "
        f"({skipped} empty rows skipped)"
    )

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".lp", dir=path.parent)
    os.close(fd)
    try:
        prob.writeLP(tmp_name)
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    return path


def check_symmetry(
    y: "ConditionalFlowSet", anchors: Iterable[StageArc] | None = None
) -> SymmetryReport:
    """Largest |y(a, b) - y(b, a)| over stored pairs, with a witness."""
    pairs = 0
    worst = Fraction(0)
    witness: tuple[StageArc, StageArc] | None = None
    for a in anchors if anchors is not None else y.anchors():
        row = y.flow(a)
        column = y.column(a)
        for b in sorted(set(row) | set(column)):
            if b == a:
                continue
            pairs += 1
            diff = abs(row.get(b, Fraction(0)) - column.get(b, Fraction(0)))
            if diff > worst:
                worst, witness = diff, (a, b)
    if witness is not None:
        logger.warning(f"Asymmetric pair {witness[0].label()} {witness[1].label()}: {worst}")
    return SymmetryReport(pairs_checked=pairs, max_asymmetry=worst, witness=witness)


def evaluate_row(row: LinearRow, value: Callable[[Variable], Fraction]) -> Fraction:
    """Exact residual lhs - rhs of ``row`` under ``value``."""
    return sum((c * value(v) for v, c in row.terms), Fraction(0)) - row.rhs
