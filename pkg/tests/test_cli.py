"""Tests for the command-line entry point."""

import os
from unittest.mock import patch

import pytest

from src.certificate import tour_certificate, write_certificate
from src.cli import build_parser, main, resolve
from src.models import StagePlan
from tests.test_utils import TINY3_TEXT, unit_instance

pytest_plugins = ["tests.test_utils"]


@pytest.fixture
def tiny3_certificate(tmp_path):
    """Tour certificate of tiny3 written to disk."""
    return write_certificate(tour_certificate(unit_instance(3), [1, 2, 3]), tmp_path / "tour-cert.txt")


def run(*argv: str, out_dir) -> int:
    return main([*argv, "--out-dir", str(out_dir), "--no-timestamp", "--log-level", "WARNING"])


class TestArguments:
    """Test argument parsing and configuration merging."""

    def test_defaults(self):
        """Test the parser defaults to the canonical pipeline."""
        with patch.dict(os.environ, {}, clear=True):
            cfg = resolve(build_parser().parse_args([]))
        assert cfg.command == "pipeline"
        assert cfg.instance == "canonical"
        assert cfg.settings.stage_plan is StagePlan.REPAIRED
        assert cfg.settings.flow_constant == 192
        assert cfg.timestamp

    def test_flags_override_environment(self, tmp_path):
        """Test command-line flags win over REFUTE_* variables."""
        env = {"REFUTE_STAGE_PLAN": "annex-c", "REFUTE_THREADS": "2"}
        with patch.dict(os.environ, env, clear=True):
            args = build_parser().parse_args(["verify", "--threads", "4", "--family", "C11", "--family", "BASE"])
            cfg = resolve(args)
        assert cfg.settings.stage_plan is StagePlan.ANNEX_C
        assert cfg.settings.threads == 4
        assert cfg.families == ["C11", "BASE"]

    def test_repair_and_integer_flags(self):
        """Test reroute and integer-mode flags reach the settings."""
        with patch.dict(os.environ, {}, clear=True):
            args = build_parser().parse_args(
                ["lift", "--no-repair", "--max-moves", "5", "--integer-mode"]
            )
            cfg = resolve(args)
        assert cfg.settings.lift_repair is False
        assert cfg.settings.lift_repair_max_moves == 5
        assert cfg.settings.integer_mode is True

    def test_malformed_environment(self):
        """Test a malformed REFUTE_* value is an input error."""
        with patch.dict(os.environ, {"REFUTE_THREADS": "abc"}, clear=True):
            assert main(["solve"]) == 2

    def test_help(self, capsys):
        """Test --help exits cleanly."""
        assert main(["--help"]) == 0
        assert "staged-flow-refute" in capsys.readouterr().out

    @pytest.mark.parametrize(
        "argv",
        [
            ["unknown-command"],
            ["verify", "--family", "C99"],
            ["solve", "--flow-constant", "abc"],
            ["solve", "--threads", "0"],
            ["solve", "--integer-mode", "--flow-constant", "1"],
            ["lift", "--max-moves", "0"],
        ],
    )
    def test_bad_arguments(self, argv):
        """Test argument and configuration errors exit with 2."""
        assert main(argv) == 2


class TestCommands:
    """Test each command end to end on small instances."""

    def test_pipeline_on_tour_instance(self, tiny3_file, tmp_path):
        """Test the pipeline falls back to the optimal tour and does not refute."""
        out = tmp_path / "out"
        assert run("pipeline", "--instance", str(tiny3_file), out_dir=out) == 1
        machine = (out / "report-repaired.machine").read_text().splitlines()
        assert "verdict=DOES-NOT-REFUTE objective=3/1 bound=3/1 gap=0/1 max_support_cost=1" in machine
        assert (out / "instance.txt").read_text().splitlines()[0] == "n=3"

    def test_compare_plans(self, tiny3_file, tmp_path):
        """Test both plans run and the matrix is written."""
        out = tmp_path / "out"
        assert run("pipeline", "--instance", str(tiny3_file), "--compare-plans", out_dir=out) == 1
        lines = (out / "plan-matrix.txt").read_text().splitlines()
        assert lines[-2:] == ["verdict repaired: DOES-NOT-REFUTE", "verdict annex-c: DOES-NOT-REFUTE"]

    def test_solve(self, tiny3_file, tmp_path):
        """Test the solver writes the tour and its counts."""
        out = tmp_path / "out"
        assert run("solve", "--instance", str(tiny3_file), "--count", out_dir=out) == 0
        lines = (out / "tour.txt").read_text().splitlines()
        assert lines[0] == "value=3 large_arcs=0 method=held-karp"
        assert lines[1].startswith("order=1 ")
        assert "count directed=2" in lines

    def test_hcp_seed(self, tmp_path, capsys):
        """Test the seed graph has no Hamiltonian cycle."""
        assert run("hcp", "--instance", "seed", out_dir=tmp_path) == 0
        assert capsys.readouterr().out.splitlines()[0] == "NO"

    def test_hcp_canonical_is_seed(self, tmp_path, capsys):
        """Test the canonical name checks the seed graph for hcp."""
        assert run("hcp", "--instance", "canonical", out_dir=tmp_path) == 0
        assert capsys.readouterr().out.splitlines()[0] == "NO"

    def test_certificate_on_canonical(self, tmp_path):
        """Test the canonical certificate file."""
        out = tmp_path / "out"
        assert run("certificate", out_dir=out) == 0
        lines = (out / "certificate-repaired.txt").read_text().splitlines()
        assert lines[0] == "F=192/1"
        assert sum(1 for line in lines if line.startswith("x ")) == 5738

    def test_certificate_needs_roles(self, tiny3_file, tmp_path):
        """Test an instance without source and sink is an input error."""
        assert run("certificate", "--instance", str(tiny3_file), out_dir=tmp_path) == 2

    def test_lift(self, tiny3_file, tiny3_certificate, tmp_path):
        """Test lifting writes y entries next to x."""
        out = tmp_path / "out"
        assert run("lift", "--instance", str(tiny3_file), "--certificate", str(tiny3_certificate), out_dir=out) == 0
        lines = (out / "lifted-tour-cert.txt").read_text().splitlines()
        assert sum(1 for line in lines if line.startswith("y ")) == 9

    def test_lift_blocked(self, tiny3_file, tmp_path):
        """Test an x that breaks BASE is not lifted."""
        path = tmp_path / "broken.txt"
        path.write_text("F=1/1\nx 1 1 2 1/1\n")
        assert run("lift", "--instance", str(tiny3_file), "--certificate", str(path), out_dir=tmp_path) == 1

    def test_lift_failure_grouped(self, tmp_path, capsys):
        """Test a lift the reroutes cannot finish reports per-family totals."""
        instance = tmp_path / "unit4.txt"
        lines = [f"{i} {j} 1" for i in range(1, 5) for j in range(1, 5) if i != j]
        instance.write_text("n=4\n" + "\n".join(lines) + "\n")
        path = tmp_path / "walk.txt"
        path.write_text("F=1/1\nx 1 1 2 1/1\nx 2 2 3 1/1\nx 3 3 2 1/1\nx 2 4 1 1/1\n")
        argv = ["lift", "--instance", str(instance), "--certificate", str(path)]
        assert run(*argv, out_dir=tmp_path) == 1
        out = capsys.readouterr().out
        assert "repair left 8 visit rows on 4 anchors" in out
        assert "C11 total |residual| 8" in out

    @pytest.mark.parametrize("materialize", [False, True])
    def test_verify(self, tiny3_file, tiny3_certificate, tmp_path, capsys, materialize):
        """Test verification prints one machine line per family."""
        argv = ["verify", "--instance", str(tiny3_file), "--certificate", str(tiny3_certificate)]
        if materialize:
            argv.append("--materialize")
        assert run(*argv, "--family", "BASE", "--family", "C13", out_dir=tmp_path) == 0
        out = capsys.readouterr().out
        assert "family=BASE rows=8 violations=0 max=0/1" in out
        assert "family=C13 rows=21 violations=0 max=0/1" in out

    def test_verify_without_certificate(self, tiny3_file, tmp_path):
        """Test verify insists on a certificate file."""
        assert run("verify", "--instance", str(tiny3_file), out_dir=tmp_path) == 2

    def test_missing_instance(self, tmp_path):
        """Test an unreadable instance file exits with 2."""
        assert run("solve", "--instance", str(tmp_path / "missing.txt"), out_dir=tmp_path) == 2

    def test_malformed_instance(self, tmp_path):
        """Test a malformed instance file exits with 2."""
        path = tmp_path / "bad.txt"
        path.write_text(TINY3_TEXT.replace("2 3 1", "2 three 1"))
        assert run("solve", "--instance", str(path), out_dir=tmp_path) == 2

    @pytest.mark.parametrize("x_only,rows", [(True, 29), (False, 236)])
    def test_export(self, tiny3_file, tmp_path, x_only, rows):
        """Test LP and row-dump files are written."""
        out = tmp_path / "out"
        argv = ["export", "--instance", str(tiny3_file)]
        if x_only:
            argv.append("--x-only")
        assert run(*argv, out_dir=out) == 0
        assert (out / "model.lp").exists()
        assert len((out / "rows.txt").read_text().splitlines()) == rows

    def test_report(self, tiny3_file, tiny3_certificate, tmp_path):
        """Test the report command writes both report files."""
        out = tmp_path / "out"
        assert run("report", "--instance", str(tiny3_file), "--certificate", str(tiny3_certificate), out_dir=out) == 1
        assert (out / "report.txt").read_text().splitlines()[0] == "Verdict: DOES-NOT-REFUTE"
        assert (out / "report.machine").exists()

    def test_out_dir_from_environment(self, tiny3_file, tmp_path):
        """Test REFUTE_OUT_DIR sets the artifact directory."""
        out = tmp_path / "env-out"
        with patch.dict(os.environ, {"REFUTE_OUT_DIR": str(out)}):
            assert main(["solve", "--instance", str(tiny3_file), "--log-level", "WARNING"]) == 0
        assert (out / "tour.txt").exists()
