"""Tests for certificate generation, diagnostics, lifting and certificate files."""

from fractions import Fraction

import pytest

from src.certificate import (
    ConditionalFlowSet,
    LiftRule,
    SparseFlow,
    base_residuals,
    certificate_diagnostics,
    certificate_objective,
    check_integer_mode,
    emission_profile,
    escape_cut_check,
    generate_x_certificate,
    lift_conditional_flows,
    load_certificate,
    tour_certificate,
    visit_mass,
    write_certificate,
)
from src.errors import CertificateError, InstanceFormatError, LiftRepairError
from src.instances import canonical_counterexample
from src.lp_model import check_symmetry
from src.models import StageArc, TspInstance
from tests.test_utils import (
    ANNEX_C_OBJECTIVE,
    ANNEX_C_SUPPORT_SIZE,
    CANONICAL_SUPPORT_SIZE,
    MERGE5_TOURS,
    REPAIRED_OBJECTIVE,
    unit_instance,
)

pytest_plugins = ["tests.test_utils"]


class TestSparseFlow:
    """Test the sparse x container."""

    def test_zeros_dropped(self):
        """Test zero entries are not stored."""
        x = SparseFlow({StageArc(1, 1, 2): Fraction(1), StageArc(2, 2, 3): 0}, Fraction(1))
        assert len(x) == 1
        assert x.get(StageArc(2, 2, 3)) == 0

    def test_negative_rejected(self):
        """Test negative values are rejected."""
        with pytest.raises(CertificateError, match="non-negative"):
            SparseFlow({StageArc(1, 1, 2): Fraction(-1)}, Fraction(1))

    def test_indices(self, mixture4):
        """Test per node and stage totals."""
        _, x = mixture4
        assert x.out_totals[(1, 1)] == 2
        assert x.in_totals[(4, 3)] == 2
        assert [a for a, _ in x.out_index[(3, 2)]] == [StageArc(3, 2, 2)]

    def test_with_value(self, tiny3):
        """Test single-entry replacement leaves the original intact."""
        x = tour_certificate(tiny3, [1, 2, 3])
        y = x.with_value(StageArc(2, 2, 3), 5)
        assert y.get(StageArc(2, 2, 3)) == 5
        assert x.get(StageArc(2, 2, 3)) == 1

    def test_invalid_support(self, tiny3):
        """Test invalid entries are reported."""
        x = tour_certificate(tiny3, [1, 2, 3]).with_value(StageArc(2, 2, 2), 1)
        assert x.invalid_support(tiny3) == [StageArc(2, 2, 2)]


class TestCanonicalCertificate:
    """Test the generated certificate of the 51-node instance."""

    def test_repaired_support(self, repaired_certificate):
        """Test the repaired plan's size and spot values."""
        x = repaired_certificate
        assert len(x) == CANONICAL_SUPPORT_SIZE
        assert x.flow_constant == 192
        assert x.get(StageArc(1, 1, 2)) == 192
        assert x.get(StageArc(2, 2, 17)) == 4
        assert x.get(StageArc(5, 7, 6)) == 1
        assert x.get(StageArc(3, 7, 4)) == 2
        assert x.get(StageArc(3, 50, 51)) == 4
        assert x.get(StageArc(3, 50, 4)) == 0
        assert x.get(StageArc(51, 51, 1)) == 192

    def test_integral_at_192(self, repaired_certificate):
        """Test every value is an integer when F = 192."""
        assert all(v.denominator == 1 for v in repaired_certificate.entries.values())

    def test_annex_c_support(self, annex_c_certificate):
        """Test the verbatim plan runs internal stages through n - 1."""
        x = annex_c_certificate
        assert len(x) == ANNEX_C_SUPPORT_SIZE
        assert x.get(StageArc(3, 50, 4)) == 2
        assert x.get(StageArc(3, 50, 51)) == 4

    def test_objectives(self, canonical, repaired_certificate, annex_c_certificate):
        """Test per-unit objectives and the costliest support arc."""
        repaired = certificate_objective(repaired_certificate, canonical)
        annex_c = certificate_objective(annex_c_certificate, canonical)
        assert repaired.value == REPAIRED_OBJECTIVE
        assert annex_c.value == ANNEX_C_OBJECTIVE
        assert repaired.max_support_cost == 3

    def test_scaled_flow_constant(self, canonical):
        """Test the per-unit objective does not depend on F."""
        x = generate_x_certificate(canonical, 1)
        assert x.get(StageArc(2, 2, 17)) == Fraction(1, 48)
        assert certificate_objective(x, canonical).value == REPAIRED_OBJECTIVE

    def test_no_invalid_support(self, canonical, repaired_certificate, annex_c_certificate):
        """Test both plans stay inside the valid variables."""
        assert repaired_certificate.invalid_support(canonical) == []
        assert annex_c_certificate.invalid_support(canonical) == []

    def test_repaired_satisfies_base(self, canonical, repaired_certificate):
        """Test the repaired plan leaves no BASE residual."""
        assert base_residuals(repaired_certificate, canonical) == {}

    def test_annex_c_base_residuals(self, canonical, annex_c_certificate):
        """Test the verbatim plan breaks conservation around the sink hop."""
        residuals = base_residuals(annex_c_certificate, canonical)
        assert len(residuals) == 96
        assert residuals["BASE[k=3,s=49]"] == -4
        assert residuals["BASE[k=3,s=50]"] == 4
        assert max(abs(r) for r in residuals.values()) == 4


class TestIntegerMode:
    """Test the integral certificate checks."""

    def test_flow_constant_divisible(self, canonical):
        """Test integer mode refuses F not divisible by four per Group node."""
        with pytest.raises(CertificateError, match="divisible by 192"):
            generate_x_certificate(canonical, 1, integer_mode=True)
        with pytest.raises(CertificateError, match="divisible by 192"):
            generate_x_certificate(canonical, 96, integer_mode=True)

    def test_integral_certificate(self, canonical):
        """Test F = 384 gives an integral certificate."""
        x = generate_x_certificate(canonical, 384, integer_mode=True)
        check_integer_mode(x)
        assert x.get(StageArc(5, 7, 6)) == 2

    def test_fractional_values_refused(self, canonical):
        """Test fractional entries are reported with the first offender."""
        x = generate_x_certificate(canonical, 1)
        with pytest.raises(CertificateError, match=r"first at \(2,2,"):
            check_integer_mode(x)

    def test_fractional_flow_constant_refused(self):
        """Test a fractional F is refused on its own."""
        x = SparseFlow({StageArc(1, 1, 2): Fraction(1)}, Fraction(1, 2))
        with pytest.raises(CertificateError, match="0 fractional, first at F"):
            check_integer_mode(x)


class TestGeneratorPreconditions:
    """Test the generator's structural checks."""

    def test_needs_roles(self):
        """Test instances without source and sink are refused."""
        with pytest.raises(CertificateError, match="source and sink"):
            generate_x_certificate(unit_instance(6))

    def test_needs_size(self):
        """Test tiny instances are refused."""
        with pytest.raises(CertificateError, match="too small"):
            generate_x_certificate(unit_instance(4, source=2, sink=4))

    def test_large_role_arc(self):
        """Test a LARGE sink arc is refused."""
        entries = dict(canonical_counterexample().listed_entries())
        del entries[(3, 51)]
        t = TspInstance.from_entries(51, entries, origin=1, source=2, sink=51)
        with pytest.raises(CertificateError, match="3 -> sink arc is LARGE"):
            generate_x_certificate(t)

    def test_unbalanced_split_weights(self):
        """Test a Group node whose weights do not sum to one is refused."""
        entries = dict(canonical_counterexample().listed_entries())
        del entries[(3, 4)]
        t = TspInstance.from_entries(51, entries, origin=1, source=2, sink=51)
        with pytest.raises(CertificateError, match="Split weights at node 3"):
            generate_x_certificate(t)

    def test_unknown_cost(self):
        """Test Group arcs priced outside the split table are refused."""
        t = unit_instance(6, source=2, sink=6)
        t = TspInstance.from_entries(
            6, {**t.listed_entries(), (3, 4): 7}, origin=1, source=2, sink=6
        )
        with pytest.raises(CertificateError, match=r"Group arc \(3,4\) has cost 7"):
            generate_x_certificate(t)


class TestDiagnostics:
    """Test emission, visit mass and escape checks."""

    def test_emission_profile(self, canonical, repaired_certificate, annex_c_certificate):
        """Test each Group node emits F/G per stage, doubled at n - 1 by annex-c."""
        repaired = emission_profile(repaired_certificate, canonical)
        annex_c = emission_profile(annex_c_certificate, canonical)
        assert set(repaired[3]) == set(range(3, 51))
        assert set(repaired[3].values()) == {4}
        assert annex_c[3][50] == 8
        assert annex_c[3][49] == 4

    def test_visit_mass(self, canonical, repaired_certificate):
        """Test both visit tallies of a Group node."""
        mass = visit_mass(repaired_certificate, canonical)
        assert mass[3].with_source_hop == 192
        assert mass[3].internal == 188
        assert len(mass) == 48

    def test_escape_check_canonical(self, canonical, repaired_certificate):
        """Test every small connected Group subset lets F/G escape."""
        report = escape_cut_check(repaired_certificate, canonical, max_size=4)
        assert report.violations == 0
        assert report.min_leaving == 4
        assert report.subsets_checked > 0

    def test_escape_check_sampled(self, canonical, repaired_certificate):
        """Test sampled larger subsets are checked deterministically."""
        first = escape_cut_check(repaired_certificate, canonical, max_size=2, samples=5, seed=7)
        second = escape_cut_check(repaired_certificate, canonical, max_size=2, samples=5, seed=7)
        assert first == second
        assert first.violations == 0

    def test_escape_check_counts_every_stage(self, canonical, repaired_certificate):
        """Test shared-stage evaluation still counts each subset-stage pair."""
        singles = escape_cut_check(repaired_certificate, canonical, max_size=1)
        pairs = escape_cut_check(repaired_certificate, canonical, max_size=2)
        assert singles.subsets_checked % 48 == 0
        assert pairs.subsets_checked > singles.subsets_checked
        assert singles.min_leaving == 4

    def test_certificate_diagnostics(self, canonical, repaired_certificate):
        """Test the diagnostics summary lines."""
        diagnostics = certificate_diagnostics(repaired_certificate, canonical, escape_subset_size=3)
        lines = diagnostics.lines()
        assert lines[0] == "Emission: 2304 Group node-stage pairs, outflow 4"
        assert lines[1] == "Visit mass with source hop: 192"
        assert lines[2] == "Visit mass without source hop: 188"
        assert lines[3].startswith("Escape: ")
        assert lines[3].endswith("min leaving 4, 0 below F/G")
        machine = diagnostics.machine_line()
        assert machine.startswith("diagnostics emission=4/1 visits_with_hop=192/1 visits_internal=188/1 ")
        assert machine.endswith("escape_min=4/1 escape_violations=0")

    def test_diagnostics_span_annex_c(self, canonical, annex_c_certificate):
        """Test differing values are shown as a range."""
        diagnostics = certificate_diagnostics(annex_c_certificate, canonical, escape_subset_size=1)
        assert diagnostics.lines()[0].endswith("outflow 4..8")

    def test_escape_check_trapped_flow(self, mixture4):
        """Test a node with no Group outflow at a stage is flagged."""
        t, x = mixture4
        report = escape_cut_check(x, t, max_size=2)
        assert report.violations > 0
        assert report.min_leaving == 0
        assert report.witness is not None


class TestLift:
    """Test conditional-flow lifting."""

    def test_tour_lift(self, tiny3):
        """Test every anchor of a tour sees the whole tour."""
        x = tour_certificate(tiny3, [1, 2, 3])
        y = lift_conditional_flows(x, tiny3)
        assert isinstance(y, ConditionalFlowSet)
        assert len(y) == 3
        for a in x.support:
            assert y[a] == dict(x.entries)

    def test_lift_requires_base(self, tiny3):
        """Test BASE residuals block the lift and travel with the error."""
        x = tour_certificate(tiny3, [1, 2, 3]).with_value(StageArc(2, 2, 3), 2)
        with pytest.raises(LiftRepairError, match="violates") as exc:
            lift_conditional_flows(x, tiny3)
        assert exc.value.residuals["BASE[k=2,s=1]"] == -1

    def test_annex_c_cannot_lift(self, canonical, annex_c_certificate):
        """Test the verbatim plan is refused by the lift."""
        with pytest.raises(LiftRepairError) as exc:
            lift_conditional_flows(annex_c_certificate, canonical)
        assert len(exc.value.residuals) == 96

    def test_mixture_split(self, mixture4):
        """Test flow through a shared arc is divided by its sources."""
        t, x = mixture4
        y = lift_conditional_flows(x, t)
        last = StageArc(4, 4, 1)
        flow = y[last]
        assert flow[last] == 2
        assert flow[StageArc(3, 3, 4)] == 1
        assert flow[StageArc(1, 1, 2)] == 1
        assert y.entry(StageArc(1, 1, 2), last) == 1
        assert y.column(last) == {
            a: Fraction(1) for a in x.support if a != last
        }

    def test_entry_matches_flow(self, merge5):
        """Test point lookups agree with whole-row flows."""
        t, x = merge5
        y = lift_conditional_flows(x, t)
        for a in y:
            flow = y.flow(a)
            for b in x.support:
                assert y.entry(a, b) == flow.get(b, 0)

    def test_column_is_transpose(self, merge5):
        """Test columns agree with rows read the other way."""
        t, x = merge5
        y = lift_conditional_flows(x, t)
        for a in x.support:
            for b, v in y.column(a).items():
                assert y.entry(b, a) == v

    def test_not_an_anchor(self, tiny3):
        """Test unsupported anchors raise KeyError."""
        y = lift_conditional_flows(tour_certificate(tiny3, [1, 2, 3]), tiny3)
        with pytest.raises(KeyError):
            y[StageArc(1, 1, 3)]
        assert y.flow(StageArc(1, 1, 3)) == {}

    def test_proportional_rule(self, merge5):
        """Test the product rule off the anchor's stage."""
        t, x = merge5
        y = lift_conditional_flows(x, t, rule=LiftRule.PROPORTIONAL)
        a, b = StageArc(1, 1, 2), StageArc(5, 5, 1)
        assert y.entry(a, b) == 1
        assert y.entry(a, StageArc(1, 1, 4)) == 0
        assert y.entry(a, a) == 1

    def test_with_flow_copies(self, tiny3):
        """Test overrides never touch the source set."""
        y = lift_conditional_flows(tour_certificate(tiny3, [1, 2, 3]), tiny3)
        a = StageArc(1, 1, 2)
        edited = y.with_flow(a, {a: Fraction(1)})
        assert edited.flow(a) == {a: 1}
        assert len(y.flow(a)) == 3


class TestLiftRepair:
    """Test the reroute pass after the conditioned lift."""

    def test_crossing_tours_untangled(self, merge5):
        """Test each anchor's flow becomes the unit tour through it."""
        t, x = merge5
        y = lift_conditional_flows(x, t)
        shared = StageArc(5, 5, 1)
        tours = [tour_certificate(t, order).entries for order in MERGE5_TOURS]
        for a in x.support:
            if a == shared:
                assert y.flow(a) == dict(x.entries)
            else:
                assert y.flow(a) == next(dict(tour) for tour in tours if a in tour)
        assert y.moves == {a: 1 for a in x.support if a != shared}
        assert y.unresolved == {}
        assert check_symmetry(y).symmetric

    def test_unrepaired_lift_kept(self, merge5):
        """Test repair=False leaves the conditioned rule untouched."""
        t, x = merge5
        y = lift_conditional_flows(x, t, repair=False)
        a = StageArc(1, 1, 2)
        assert y.moves == {}
        assert y.entry(a, StageArc(2, 2, 3)) == 1
        assert y.entry(a, StageArc(3, 3, 4)) == Fraction(1, 2)
        assert y.entry(a, StageArc(3, 3, 2)) == Fraction(1, 2)

    def test_repaired_column(self, merge5):
        """Test columns read the rerouted rows."""
        t, x = merge5
        y = lift_conditional_flows(x, t)
        assert y.column(StageArc(2, 2, 3)) == {
            StageArc(1, 1, 2): Fraction(1),
            StageArc(3, 3, 4): Fraction(1),
            StageArc(4, 4, 5): Fraction(1),
            StageArc(5, 5, 1): Fraction(1),
        }

    def test_threads_agree(self, merge5):
        """Test chunked repair gives the same flows."""
        t, x = merge5
        single = lift_conditional_flows(x, t)
        threaded = lift_conditional_flows(x, t, threads=3)
        assert {a: single.flow(a) for a in single} == {a: threaded.flow(a) for a in threaded}
        assert single.moves == threaded.moves

    def test_no_detour_raises(self, walk4):
        """Test residual visit rows travel with the error, grouped by family."""
        t, x = walk4
        with pytest.raises(LiftRepairError, match="repair left 8 visit rows on 4 anchors") as exc:
            lift_conditional_flows(x, t)
        assert exc.value.residuals["C11[a=(1,1,2),k=2]"] == 1
        assert exc.value.residuals["C11[a=(1,1,2),k=4]"] == -1
        assert exc.value.by_family == {"C11": Fraction(8)}

    def test_non_strict_keeps_residuals(self, walk4):
        """Test strict=False returns the lift with its unresolved rows."""
        t, x = walk4
        y = lift_conditional_flows(x, t, strict=False)
        assert len(y.unresolved) == 8
        assert y.moves == {}
        assert y.flow(StageArc(1, 1, 2)) == dict(x.entries)

    def test_move_cap(self, merge5):
        """Test max_moves=1 still fixes anchors needing one reroute."""
        t, x = merge5
        y = lift_conditional_flows(x, t, max_moves=1)
        assert y.unresolved == {}


class TestCertificateFiles:
    """Test certificate writing and loading."""

    def test_write_and_load_with_y(self, mixture4, tmp_path):
        """Test x and y lines are read back exactly."""
        t, x = mixture4
        y = lift_conditional_flows(x, t)
        path = write_certificate(x, tmp_path / "certificate.txt", y, timestamp=True)
        loaded_x, loaded_y = load_certificate(path)
        assert loaded_x.entries == x.entries
        assert loaded_x.flow_constant == 2
        assert loaded_y is not None
        assert loaded_y.rule is LiftRule.EXPLICIT
        assert {a: loaded_y.flow(a) for a in loaded_y} == {a: y.flow(a) for a in y}

    def test_file_layout(self, tiny3, tmp_path):
        """Test the header and x line layout."""
        x = tour_certificate(tiny3, [1, 2, 3])
        lines = write_certificate(x, tmp_path / "c.txt").read_text().splitlines()
        assert lines == ["F=1/1", "x 1 1 2 1/1", "x 2 2 3 1/1", "x 3 3 1 1/1"]

    def test_x_only_file(self, tmp_path):
        """Test a file without y lines loads without a lift."""
        path = tmp_path / "c.txt"
        path.write_text("# header\nF=2\nx 1 1 2 2\n")
        x, y = load_certificate(path)
        assert y is None
        assert x.get(StageArc(1, 1, 2)) == 2

    @pytest.mark.parametrize(
        "text,line_number,message",
        [
            ("x 1 1 2 1\n", 1, "must start with F="),
            ("F=1\nF=2\n", 2, "duplicate F"),
            ("F=1\nx 1 1 2\n", 2, "unrecognised line"),
            ("F=1\nx 1 a 2 1\n", 2, "bad index"),
            ("F=1\nx 1 1 2 -1\n", 2, "negative value"),
            ("F=1\nx 1 1 2 1/0\n", 2, "Invalid rational"),
            ("F=1\nx 1 1 2 1\nx 1 1 2 1\n", 3, "duplicate x entry"),
            ("F=1\ny 1 1 2 1 1 2 1\ny 1 1 2 1 1 2 1\n", 3, "duplicate y entry"),
        ],
    )
    def test_load_errors(self, tmp_path, text, line_number, message):
        """Test malformed certificates report the offending line."""
        path = tmp_path / "c.txt"
        path.write_text(text)
        with pytest.raises(InstanceFormatError, match=message) as exc:
            load_certificate(path)
        assert exc.value.line_number == line_number

    def test_zero_flow_constant(self, tmp_path):
        """Test F must be non-zero."""
        path = tmp_path / "c.txt"
        path.write_text("F=0\n")
        with pytest.raises(InstanceFormatError, match="missing or zero F"):
            load_certificate(path)
