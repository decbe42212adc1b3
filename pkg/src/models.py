"""Pydantic models and index types for the staged-flow refutation toolkit."""

from collections.abc import Iterable, Mapping
from enum import StrEnum
from fractions import Fraction
from typing import NamedTuple, Self

from pydantic import BaseModel, ConfigDict, field_validator, model_validator

DEFAULT_LARGE = 200


def format_fraction(value: Fraction) -> str:
    """Render a rational as ``num/den``."""
    return f"{value.numerator}/{value.denominator}"


def parse_fraction(text: str) -> Fraction:
    """Parse ``num/den`` or an integer literal into a Fraction."""
    try:
        return Fraction(text.strip())
    except (ValueError, ZeroDivisionError) as e:
        raise ValueError(f"Invalid rational value: {text!r}") from e


class StageArc(NamedTuple):
    """Arc i -> j used at stage s; the index of an x variable."""

    i: int
    s: int
    j: int

    def label(self) -> str:
        return f"({self.i},{self.s},{self.j})"


class YVar(NamedTuple):
    """Conditional-flow variable y(anchor, probe)."""

    anchor: StageArc
    probe: StageArc


Variable = StageArc | YVar


def variable_name(var: Variable) -> str:
    """LP-safe name: ``x_i_s_j`` or ``y_i_s_j_k_r_t``."""
    if isinstance(var, YVar):
        a, b = var
        return f"y_{a.i}_{a.s}_{a.j}_{b.i}_{b.s}_{b.j}"
    return f"x_{var.i}_{var.s}_{var.j}"


def variable_sort_key(var: Variable) -> tuple:
    if isinstance(var, YVar):
        return (1, var.anchor, var.probe)
    return (0, var)


class Relation(StrEnum):
    EQ = "="
    LE = "<="
    GE = ">="


class LinearRow(NamedTuple):
    """One canonicalised constraint row."""

    name: str
    family: "ConstraintFamily"
    terms: tuple[tuple[Variable, Fraction], ...]
    relation: Relation
    rhs: Fraction


class SplitKind(StrEnum):
    """Node enlargement patterns."""

    SPLIT2 = "split2"
    SPLIT3 = "split3"

    @property
    def size(self) -> int:
        return 2 if self is SplitKind.SPLIT2 else 3

    @classmethod
    def for_degree(cls, degree: int) -> "SplitKind":
        if degree == 2:
            return cls.SPLIT2
        if degree == 3:
            return cls.SPLIT3
        raise ValueError(f"No enlargement pattern for degree {degree}")


class ConstraintFamily(StrEnum):
    """Constraint families of the staged-flow relaxation."""

    BASE = "BASE"
    C6 = "C6"
    C7 = "C7"
    C8 = "C8"
    C9 = "C9"
    C10 = "C10"
    C11 = "C11"
    C12 = "C12"
    C13 = "C13"
    C14 = "C14"

    @property
    def description(self) -> str:
        return FAMILY_DESCRIPTIONS[self]

    @property
    def uses_y(self) -> bool:
        return self not in (ConstraintFamily.BASE, ConstraintFamily.C13)


FAMILY_DESCRIPTIONS = {
    ConstraintFamily.BASE: "x-level flow: F leaves the origin, per-stage conservation, F returns",
    ConstraintFamily.C6: "flow for pairs at stages 1 and 2 equals F; pairs at stages 2 and 3 preserved",
    ConstraintFamily.C7: "conditional conservation at stages following the anchor",
    ConstraintFamily.C8: "conditional conservation at stages preceding the anchor",
    ConstraintFamily.C9: "conditional stage totals after the anchor equal x(anchor)",
    ConstraintFamily.C10: "conditional stage totals before the anchor equal x(anchor)",
    ConstraintFamily.C11: "conditional flow reaches every node with value x(anchor)",
    ConstraintFamily.C12: "z/y linkage collapsed to y(a,a) = x(a)",
    ConstraintFamily.C13: "invalid x variables are zero",
    ConstraintFamily.C14: "invalid or same-stage y variables are zero",
}

X_FAMILIES = (ConstraintFamily.BASE, ConstraintFamily.C13)
Y_FAMILIES = tuple(f for f in ConstraintFamily if f.uses_y)
ALL_FAMILIES = tuple(ConstraintFamily)


class StagePlan(StrEnum):
    REPAIRED = "repaired"
    ANNEX_C = "annex-c"


class Verdict(StrEnum):
    REFUTES = "REFUTES"
    DOES_NOT_REFUTE = "DOES-NOT-REFUTE"
    PARTIAL = "PARTIAL"


class HamiltonianStatus(StrEnum):
    YES = "YES"
    NO = "NO"
    TIMEOUT = "TIMEOUT"


class TspInstance(BaseModel):
    """Directed TSP instance with integer costs and 1-based node ids."""

    model_config = ConfigDict(frozen=True)

    n: int
    cost: tuple[tuple[int, ...], ...]
    origin: int = 1
    source: int | None = None
    sink: int | None = None
    large: int = DEFAULT_LARGE

    @field_validator("n")
    @classmethod
    def validate_n(cls, v: int) -> int:
        """Validate node count."""
        if v < 1:
            raise ValueError("Instance needs at least one node")
        return v

    @model_validator(mode="after")
    def validate_matrix(self) -> Self:
        """Validate matrix shape, costs and role nodes."""
        if len(self.cost) != self.n or any(len(row) != self.n for row in self.cost):
            raise ValueError("Cost matrix must be n x n")
        if any(c < 0 for row in self.cost for c in row):
            raise ValueError("Costs must be non-negative")
        for role in (self.origin, self.source, self.sink):
            if role is not None and not 1 <= role <= self.n:
                raise ValueError(f"Role node {role} outside 1..{self.n}")
        return self

    @classmethod
    def from_entries(
        cls,
        n: int,
        entries: Mapping[tuple[int, int], int],
        large: int = DEFAULT_LARGE,
        origin: int = 1,
        source: int | None = None,
        sink: int | None = None,
    ) -> "TspInstance":
        """Build an instance; unlisted off-diagonal arcs cost ``large``."""
        rows = [[0 if i == j else large for j in range(n)] for i in range(n)]
        for (i, j), c in entries.items():
            if i == j:
                raise ValueError(f"Self-loop entry ({i},{j})")
            rows[i - 1][j - 1] = c
        return cls(
            n=n,
            cost=tuple(tuple(row) for row in rows),
            large=large,
            origin=origin,
            source=source,
            sink=sink,
        )

    def cost_of(self, i: int, j: int) -> int:
        return self.cost[i - 1][j - 1]

    @property
    def nodes(self) -> range:
        return range(1, self.n + 1)

    @property
    def role_nodes(self) -> frozenset[int]:
        return frozenset(r for r in (self.origin, self.source, self.sink) if r)

    def group_nodes(self) -> list[int]:
        """Nodes that are neither origin, source nor sink."""
        roles = self.role_nodes
        return [v for v in self.nodes if v not in roles]

    def is_large(self, i: int, j: int) -> bool:
        return self.cost_of(i, j) >= self.large

    def listed_entries(self) -> dict[tuple[int, int], int]:
        """Off-diagonal entries whose cost differs from ``large``."""
        return {
            (i, j): self.cost_of(i, j)
            for i in self.nodes
            for j in self.nodes
            if i != j and self.cost_of(i, j) != self.large
        }

    def is_symmetric(self) -> bool:
        return all(
            self.cost[i][j] == self.cost[j][i]
            for i in range(self.n)
            for j in range(i + 1, self.n)
        )


class HcpInstance(BaseModel):
    """Directed graph for the Hamiltonian-cycle question."""

    model_config = ConfigDict(frozen=True)

    n: int
    arcs: frozenset[tuple[int, int]]
    origin: int = 1
    source: int | None = None
    sink: int | None = None

    @model_validator(mode="after")
    def validate_arcs(self) -> Self:
        """Validate arc endpoints and reject self-loops."""
        for i, j in self.arcs:
            if i == j:
                raise ValueError(f"Self-loop arc ({i},{j})")
            if not (1 <= i <= self.n and 1 <= j <= self.n):
                raise ValueError(f"Arc ({i},{j}) outside 1..{self.n}")
        return self

    @classmethod
    def from_edges(
        cls, n: int, edges: Iterable[tuple[int, int]], **roles: int | None
    ) -> "HcpInstance":
        """Build from undirected edges (both directions become arcs)."""
        arcs = set()
        for a, b in edges:
            arcs.update({(a, b), (b, a)})
        return cls(n=n, arcs=frozenset(arcs), **roles)

    def successors(self, v: int) -> list[int]:
        return sorted(j for i, j in self.arcs if i == v)

    def predecessors(self, v: int) -> list[int]:
        return sorted(i for i, j in self.arcs if j == v)


class TourResult(BaseModel):
    """A tour starting at the origin, with its cost breakdown."""

    order: list[int]
    value: int
    large_arc_count: int
    method: str = ""
    optimal: bool = True

    @field_validator("order")
    @classmethod
    def validate_order(cls, v: list[int]) -> list[int]:
        """Validate that every node appears once."""
        if len(set(v)) != len(v):
            raise ValueError("Tour visits a node twice")
        return v

    @classmethod
    def from_order(
        cls, t: TspInstance, order: list[int], method: str = "", optimal: bool = True
    ) -> "TourResult":
        """Price a tour against an instance."""
        if sorted(order) != list(t.nodes) or order[0] != t.origin:
            raise ValueError("Order must be a permutation of all nodes from the origin")
        arcs = list(zip(order, order[1:] + order[:1], strict=True))
        return cls(
            order=order,
            value=sum(t.cost_of(i, j) for i, j in arcs),
            large_arc_count=sum(1 for i, j in arcs if t.is_large(i, j)),
            method=method,
            optimal=optimal,
        )

    def arcs(self) -> list[tuple[int, int]]:
        return list(zip(self.order, self.order[1:] + self.order[:1], strict=True))


class TourCount(BaseModel):
    """Optimal-tour multiplicity under several counting conventions."""

    value: int
    directed: int
    undirected: int
    stage_assignments: int
    orientations: int

    def conventions(self) -> dict[str, int]:
        return {
            "directed": self.directed,
            "undirected": self.undirected,
            "stage-assignments": self.stage_assignments,
            "orientations": self.orientations,
        }

    def exceeding(self, threshold: int) -> list[str]:
        """Conventions whose count is strictly above ``threshold``."""
        return [name for name, c in self.conventions().items() if c > threshold]


class HamiltonianDecision(BaseModel):
    """Outcome of a Hamiltonian-cycle search."""

    status: HamiltonianStatus
    order: list[int] | None = None
    nodes_explored: int = 0

    @model_validator(mode="after")
    def validate_witness(self) -> Self:
        """YES decisions carry a witness and nothing else does."""
        if (self.status is HamiltonianStatus.YES) != (self.order is not None):
            raise ValueError("Only YES decisions carry a witness cycle")
        return self


class FamilyResidual(BaseModel):
    """Exact verification outcome for one constraint family."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    family: ConstraintFamily
    rows_checked: int
    violations: int = 0
    max_abs_residual: Fraction = Fraction(0)
    residual_l1: Fraction = Fraction(0)
    witnesses: list[tuple[str, Fraction]] = []

    @model_validator(mode="after")
    def validate_exactness(self) -> Self:
        """No tolerance: zero violations iff zero residual."""
        if (self.violations == 0) != (self.max_abs_residual == 0):
            raise ValueError("violations and max_abs_residual disagree")
        return self

    @property
    def satisfied(self) -> bool:
        return self.violations == 0

    def line(self) -> str:
        """Machine-readable report line."""
        return (
            f"family={self.family} rows={self.rows_checked} "
            f"violations={self.violations} max={format_fraction(self.max_abs_residual)}"
        )


class ObjectiveSummary(NamedTuple):
    value: Fraction
    max_support_cost: int


class IntegralBound(BaseModel):
    """Integral optimum or certified lower bound, with its provenance."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    value: Fraction
    provenance: list[str] = []
    exact: bool = False


class RefutationVerdict(BaseModel):
    """Comparison of a certificate against the integral optimum."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    certificate_objective: Fraction
    max_support_cost: int
    integral_bound: IntegralBound
    gap: Fraction
    families_checked: list[ConstraintFamily]
    families_satisfied: list[ConstraintFamily]
    verdict: Verdict
    notes: list[str] = []

    @model_validator(mode="after")
    def validate_refutation(self) -> Self:
        """REFUTES needs every family checked and satisfied, and a strict gap."""
        if self.verdict is Verdict.REFUTES and (
            self.failed_families
            or self.unchecked_families
            or self.certificate_objective >= self.integral_bound.value
        ):
            raise ValueError("REFUTES requires all families satisfied and a positive gap")
        return self

    @property
    def failed_families(self) -> list[ConstraintFamily]:
        return [f for f in self.families_checked if f not in self.families_satisfied]

    @property
    def unchecked_families(self) -> list[ConstraintFamily]:
        return [f for f in ALL_FAMILIES if f not in self.families_checked]

    @property
    def label(self) -> str:
        if self.verdict is not Verdict.PARTIAL:
            return str(self.verdict)
        details = ",".join(self.failed_families)
        if self.unchecked_families:
            unchecked = "unchecked=" + ",".join(self.unchecked_families)
            details = f"{details};{unchecked}" if details else unchecked
        return f"PARTIAL({details})"


class SymmetryReport(BaseModel):
    """Largest |y(a,b) - y(b,a)| over the stored pairs."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    pairs_checked: int
    max_asymmetry: Fraction = Fraction(0)
    witness: tuple[StageArc, StageArc] | None = None

    @property
    def symmetric(self) -> bool:
        return self.max_asymmetry == 0
