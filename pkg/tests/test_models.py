"""Streamlined tests for Pydantic models and index types."""

from fractions import Fraction

from pydantic import ValidationError
import pytest

from src.models import (
    ALL_FAMILIES,
    ConstraintFamily,
    FamilyResidual,
    HamiltonianDecision,
    HamiltonianStatus,
    HcpInstance,
    IntegralBound,
    RefutationVerdict,
    SplitKind,
    StageArc,
    TourCount,
    TourResult,
    TspInstance,
    Verdict,
    YVar,
    format_fraction,
    parse_fraction,
    variable_name,
)
from tests.test_utils import unit_instance

pytest_plugins = ["tests.test_utils"]


class TestModels:
    """Test Pydantic models with focused, parameterized tests."""

    def test_tsp_instance_from_entries(self):
        """Test unlisted arcs default to the large cost."""
        t = TspInstance.from_entries(3, {(1, 2): 4, (2, 3): 5}, large=9)
        assert t.cost_of(1, 2) == 4
        assert t.cost_of(3, 1) == 9
        assert t.cost_of(2, 2) == 0
        assert t.is_large(3, 1)
        assert t.listed_entries() == {(1, 2): 4, (2, 3): 5}

    @pytest.mark.parametrize(
        "kwargs,message",
        [
            ({"n": 2, "cost": ((0, 1),)}, "n x n"),
            ({"n": 2, "cost": ((0, -1), (1, 0))}, "non-negative"),
            ({"n": 2, "cost": ((0, 1), (1, 0)), "sink": 3}, "outside"),
            ({"n": 0, "cost": ()}, "at least one node"),
        ],
    )
    def test_tsp_instance_invalid(self, kwargs, message):
        """Test matrix shape, cost sign and role validation."""
        with pytest.raises(ValidationError, match=message):
            TspInstance(**kwargs)

    def test_tsp_instance_rejects_self_loop_entry(self):
        """Test from_entries refuses diagonal entries."""
        with pytest.raises(ValueError, match="Self-loop"):
            TspInstance.from_entries(3, {(2, 2): 1})

    def test_group_nodes(self):
        """Test Group nodes exclude every role node."""
        t = unit_instance(5, source=2, sink=5)
        assert t.role_nodes == frozenset({1, 2, 5})
        assert t.group_nodes() == [3, 4]

    def test_symmetry(self):
        """Test cost symmetry detection."""
        assert unit_instance(4).is_symmetric()
        assert not TspInstance.from_entries(3, {(1, 2): 1}).is_symmetric()

    def test_hcp_instance_from_edges(self):
        """Test undirected edges become arc pairs."""
        h = HcpInstance.from_edges(3, [(1, 2), (2, 3)])
        assert h.arcs == frozenset({(1, 2), (2, 1), (2, 3), (3, 2)})
        assert h.successors(2) == [1, 3]
        assert h.predecessors(1) == [2]

    @pytest.mark.parametrize("arc", [(1, 1), (0, 2), (2, 4)])
    def test_hcp_instance_invalid_arcs(self, arc):
        """Test self-loops and out-of-range arcs are rejected."""
        with pytest.raises(ValidationError):
            HcpInstance(n=3, arcs=frozenset({arc}))

    def test_tour_result_from_order(self):
        """Test tour pricing counts large arcs."""
        t = TspInstance.from_entries(3, {(1, 2): 1, (2, 3): 1}, large=50)
        tour = TourResult.from_order(t, [1, 2, 3])
        assert tour.value == 52
        assert tour.large_arc_count == 1
        assert tour.arcs() == [(1, 2), (2, 3), (3, 1)]

    @pytest.mark.parametrize("order", [[2, 1, 3], [1, 2], [1, 2, 2]])
    def test_tour_result_bad_order(self, order):
        """Test orders must be permutations starting at the origin."""
        with pytest.raises(ValueError):
            TourResult.from_order(unit_instance(3), order)

    def test_tour_count_exceeding(self):
        """Test convention filtering by threshold."""
        count = TourCount(value=4, directed=6, undirected=3, stage_assignments=6, orientations=6)
        assert count.exceeding(5) == ["directed", "stage-assignments", "orientations"]
        assert count.exceeding(100) == []

    def test_hamiltonian_decision_witness(self):
        """Test only YES carries a cycle."""
        assert HamiltonianDecision(status=HamiltonianStatus.YES, order=[1, 2, 3]).order
        with pytest.raises(ValidationError, match="witness"):
            HamiltonianDecision(status=HamiltonianStatus.NO, order=[1, 2])
        with pytest.raises(ValidationError, match="witness"):
            HamiltonianDecision(status=HamiltonianStatus.YES)

    def test_family_residual_exactness(self):
        """Test violations and residual must agree."""
        ok = FamilyResidual(family=ConstraintFamily.BASE, rows_checked=8)
        assert ok.satisfied
        assert ok.line() == "family=BASE rows=8 violations=0 max=0/1"
        with pytest.raises(ValidationError, match="disagree"):
            FamilyResidual(family=ConstraintFamily.C7, rows_checked=1, violations=1)

    def test_refutes_requires_gap(self):
        """Test REFUTES cannot be built without a strict gap."""
        bound = IntegralBound(value=Fraction(3), provenance=["exact optimum 3"])
        with pytest.raises(ValidationError, match="REFUTES requires"):
            RefutationVerdict(
                certificate_objective=Fraction(3),
                max_support_cost=1,
                integral_bound=bound,
                gap=Fraction(0),
                families_checked=[ConstraintFamily.BASE],
                families_satisfied=[ConstraintFamily.BASE],
                verdict=Verdict.REFUTES,
            )

    def test_refutes_requires_every_family(self):
        """Test REFUTES cannot be built from a family subset."""
        bound = IntegralBound(value=Fraction(3), provenance=["exact optimum 3"])
        with pytest.raises(ValidationError, match="REFUTES requires"):
            RefutationVerdict(
                certificate_objective=Fraction(1),
                max_support_cost=1,
                integral_bound=bound,
                gap=Fraction(2),
                families_checked=[ConstraintFamily.BASE, ConstraintFamily.C13],
                families_satisfied=[ConstraintFamily.BASE, ConstraintFamily.C13],
                verdict=Verdict.REFUTES,
            )
        verdict = RefutationVerdict(
            certificate_objective=Fraction(1),
            max_support_cost=1,
            integral_bound=bound,
            gap=Fraction(2),
            families_checked=list(ALL_FAMILIES),
            families_satisfied=list(ALL_FAMILIES),
            verdict=Verdict.REFUTES,
        )
        assert verdict.label == "REFUTES"

    def test_partial_label(self):
        """Test PARTIAL names the failed and the unchecked families."""
        verdict = RefutationVerdict(
            certificate_objective=Fraction(1),
            max_support_cost=1,
            integral_bound=IntegralBound(value=Fraction(3), provenance=["cut"]),
            gap=Fraction(2),
            families_checked=[ConstraintFamily.BASE, ConstraintFamily.C7, ConstraintFamily.C11],
            families_satisfied=[ConstraintFamily.BASE],
            verdict=Verdict.PARTIAL,
        )
        assert verdict.label == "PARTIAL(C7,C11;unchecked=C6,C8,C9,C10,C12,C13,C14)"
        assert verdict.unchecked_families[0] is ConstraintFamily.C6


class TestIndexTypes:
    """Test index tuples, names and rational helpers."""

    def test_variable_names(self):
        """Test LP-safe variable naming."""
        a, b = StageArc(5, 7, 6), StageArc(1, 1, 2)
        assert variable_name(a) == "x_5_7_6"
        assert variable_name(YVar(a, b)) == "y_5_7_6_1_1_2"
        assert a.label() == "(5,7,6)"

    @pytest.mark.parametrize(
        "text,expected",
        [("3/4", Fraction(3, 4)), (" 8 ", Fraction(8)), ("6/8", Fraction(3, 4))],
    )
    def test_parse_fraction(self, text, expected):
        """Test rational parsing."""
        assert parse_fraction(text) == expected

    @pytest.mark.parametrize("text", ["1/0", "one", ""])
    def test_parse_fraction_invalid(self, text):
        """Test malformed rationals raise ValueError."""
        with pytest.raises(ValueError, match="Invalid rational"):
            parse_fraction(text)

    def test_format_fraction(self):
        """Test rationals always render as num/den."""
        assert format_fraction(Fraction(5)) == "5/1"
        assert format_fraction(Fraction(-1, 4)) == "-1/4"

    def test_family_scope(self):
        """Test BASE and C13 are the only x-level families."""
        assert [f for f in ConstraintFamily if not f.uses_y] == [
            ConstraintFamily.BASE,
            ConstraintFamily.C13,
        ]
        assert all(f.description for f in ConstraintFamily)

    def test_split_kind_for_degree(self):
        """Test enlargement pattern selection."""
        assert SplitKind.for_degree(2) is SplitKind.SPLIT2
        assert SplitKind.for_degree(3).size == 3
        with pytest.raises(ValueError, match="degree 4"):
            SplitKind.for_degree(4)
