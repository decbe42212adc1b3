"""Command-line entry point: ``staged-flow-refute <command> [options]``."""

import argparse
from collections.abc import Sequence
import logging
from pathlib import Path
import sys

from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape
from rich.table import Table

from .artifacts import timestamp_header, write_lines_atomic
from .certificate import (
    ConditionalFlowSet,
    SparseFlow,
    generate_x_certificate,
    lift_conditional_flows,
    load_certificate,
    write_certificate,
)
from .config import COMMANDS, RefutationConfig, RunConfig
from .errors import (
    CertificateError,
    InstanceFormatError,
    LiftRepairError,
    ModelSizeError,
    RefutationError,
    family_residuals,
)
from .instances import canonical_hcp_seed, load_hcp_instance
from .lp_model import FULL, X_ONLY, build_family_rows, export_lp, write_row_dump
from .models import (
    ALL_FAMILIES,
    ConstraintFamily,
    FamilyResidual,
    HamiltonianStatus,
    HcpInstance,
    StagePlan,
    TspInstance,
    Verdict,
)
from .oracles import count_optimal_tours, exact_tsp, hamiltonian_cycle_exists
from .pipeline import CANONICAL, SEED, RefutationPipeline
from .verifier import full_verdict, render_report, verify_families, verify_family

logger = logging.getLogger(__name__)
console = Console()
INPUT_ERRORS = (
    InstanceFormatError,
    CertificateError,
    ModelSizeError,
    ValidationError,
    ValueError,
    OSError,
)


def build_parser() -> argparse.ArgumentParser:
    defaults = RefutationConfig.from_env()
    parser = argparse.ArgumentParser(
        prog="staged-flow-refute",
        description="Counterexample, certificate and exact verifier for a staged-flow TSP relaxation.",
    )
    parser.add_argument("command", nargs="?", default="pipeline", choices=COMMANDS)
    parser.add_argument(
        "--instance",
        default=CANONICAL,
        help="Instance file, 'canonical' (51 nodes) or 'seed' (23-node HCP seed). "
        "For hcp both names mean the seed graph.",
    )
    parser.add_argument("--certificate", type=Path, help="Certificate file to read.")
    parser.add_argument("--flow-constant", default=str(defaults.flow_constant))
    parser.add_argument("--large-cost", type=int, default=defaults.large_cost)
    parser.add_argument(
        "--stage-plan", choices=[p.value for p in StagePlan], default=defaults.stage_plan.value
    )
    parser.add_argument("--compare-plans", action="store_true", help="Run both stage plans.")
    parser.add_argument("--budget", type=float, default=defaults.budget_seconds)
    parser.add_argument("--threads", type=int, default=defaults.threads)
    parser.add_argument("--out-dir", type=Path, default=defaults.out_dir)
    parser.add_argument(
        "--no-timestamp", action="store_true", help="Omit timestamp header lines."
    )
    parser.add_argument("--x-only", action="store_true", help="Export x families only.")
    parser.add_argument("--write-y", action="store_true", help="Write y entries too.")
    parser.add_argument(
        "--materialize", action="store_true", help="Verify from generated rows."
    )
    parser.add_argument("--mutations", action="store_true", help="Run the mutation suite.")
    parser.add_argument("--count", action="store_true", help="Count optimal tours.")
    parser.add_argument(
        "--integer-mode",
        action="store_true",
        default=defaults.integer_mode,
        help="Require F divisible by 192 and integral certificate values.",
    )
    parser.add_argument(
        "--no-repair",
        dest="lift_repair_flag",
        action="store_false",
        default=defaults.lift_repair,
        help="Skip the reroute pass after the lift.",
    )
    parser.add_argument("--max-moves", type=int, default=defaults.lift_repair_max_moves)
    parser.add_argument(
        "--family",
        action="append",
        default=[],
        choices=[f.value for f in ConstraintFamily],
        help="Restrict to a family (repeatable).",
    )
    parser.add_argument("--log-level", default=defaults.log_level)
    return parser


def resolve(args: argparse.Namespace) -> RunConfig:
    """Merge parsed arguments over environment defaults."""
    overrides = {
        "large_cost": args.large_cost,
        "flow_constant": args.flow_constant,
        "stage_plan": StagePlan(args.stage_plan),
        "budget_seconds": args.budget,
        "threads": args.threads,
        "integer_mode": args.integer_mode,
        "lift_repair": args.lift_repair_flag,
        "lift_repair_max_moves": args.max_moves,
        "out_dir": args.out_dir,
        "log_level": args.log_level,
    }
    settings = RefutationConfig(**{**RefutationConfig.from_env().model_dump(), **overrides})
    return RunConfig(
        command=args.command,
        instance=args.instance,
        certificate=args.certificate,
        families=args.family,
        timestamp=not args.no_timestamp,
        x_only=args.x_only,
        write_y=args.write_y,
        materialize=args.materialize,
        mutations=args.mutations,
        compare_plans=args.compare_plans,
        count=args.count,
        settings=settings,
    )


def setup_logging(level: str) -> None:
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


def _tsp_instance(cfg: RunConfig, pipeline: RefutationPipeline) -> TspInstance:
    return pipeline.load_instance(cfg.instance)


def _hcp_instance(cfg: RunConfig, pipeline: RefutationPipeline) -> HcpInstance:
    if cfg.instance in (SEED, CANONICAL):
        return canonical_hcp_seed()
    return load_hcp_instance(Path(cfg.instance))


def _lift(
    x: SparseFlow, t: TspInstance, cfg: RunConfig, strict: bool = False
) -> ConditionalFlowSet:
    s = cfg.settings
    return lift_conditional_flows(
        x,
        t,
        cache_size=s.lift_cache_size,
        repair=s.lift_repair,
        threads=s.threads,
        max_moves=s.lift_repair_max_moves,
        strict=strict,
    )


def _families(cfg: RunConfig) -> list[ConstraintFamily]:
    return [ConstraintFamily(f) for f in cfg.families] or list(ALL_FAMILIES)


def _print_families(results: dict[ConstraintFamily, FamilyResidual]) -> None:
    table = Table(title="Constraint families")
    for column in ("family", "rows", "violations", "max residual", "first witness"):
        table.add_column(column)
    for f, r in results.items():
        witness = r.witnesses[0][0] if r.witnesses else ""
        table.add_row(str(f), str(r.rows_checked), str(r.violations), str(r.max_abs_residual), escape(witness))
    console.print(table)


def _pipeline_command(cfg: RunConfig, pipeline: RefutationPipeline) -> int:
    if cfg.compare_plans:
        runs = pipeline.compare_plans(cfg.instance, cfg.timestamp)
        for plan, result in runs.items():
            console.print(f"{plan}: {result.verdict.label}")
        return 0 if any(r.exit_code == 0 for r in runs.values()) else 1
    result = pipeline.run(
        cfg.instance,
        write_y=cfg.write_y,
        timestamp=cfg.timestamp,
        mutations=cfg.mutations,
    )
    _print_families(result.results)
    console.print(f"Verdict: {result.verdict.label} (gap {result.verdict.gap})")
    return result.exit_code


def _solve_command(cfg: RunConfig, pipeline: RefutationPipeline) -> int:
    s = cfg.settings
    t = _tsp_instance(cfg, pipeline)
    tour = exact_tsp(t, s.budget_seconds, dp_max_nodes=s.dp_max_nodes)
    lines = [
        f"value={tour.value} large_arcs={tour.large_arc_count} method={tour.method}",
        "order=" + " ".join(str(v) for v in tour.order),
    ]
    if cfg.count:
        counts = count_optimal_tours(t, s.budget_seconds, s.dp_max_nodes)
        lines += [f"count {name}={c}" for name, c in counts.conventions().items()]
    header = [timestamp_header()] if cfg.timestamp else []
    write_lines_atomic(s.out_dir / "tour.txt", header + lines)
    for line in lines:
        console.print(line)
    return 0


def _hcp_command(cfg: RunConfig, pipeline: RefutationPipeline) -> int:
    decision = hamiltonian_cycle_exists(_hcp_instance(cfg, pipeline), cfg.settings.budget_seconds)
    console.print(decision.status.value)
    if decision.order is not None:
        console.print(" ".join(str(v) for v in decision.order))
    return 1 if decision.status is HamiltonianStatus.TIMEOUT else 0


def _certificate_command(cfg: RunConfig, pipeline: RefutationPipeline) -> int:
    s = cfg.settings
    t = _tsp_instance(cfg, pipeline)
    x = generate_x_certificate(t, s.flow_constant, s.stage_plan, integer_mode=s.integer_mode)
    y = _lift(x, t, cfg) if cfg.write_y else None
    path = write_certificate(x, s.out_dir / f"certificate-{s.stage_plan}.txt", y, cfg.timestamp)
    console.print(f"{len(x)} x entries written to {path}")
    return 0


def _load_certificate(cfg: RunConfig) -> tuple[SparseFlow, ConditionalFlowSet | None]:
    if cfg.certificate is None:
        raise ValueError("--certificate is required for this command")
    return load_certificate(cfg.certificate)


def _lift_command(cfg: RunConfig, pipeline: RefutationPipeline) -> int:
    t = _tsp_instance(cfg, pipeline)
    x, _ = _load_certificate(cfg)
    assert cfg.certificate is not None
    try:
        y = _lift(x, t, cfg, strict=True)
    except LiftRepairError as e:
        console.print(f"Lift failed: {e}", markup=False)
        for family, total in family_residuals(e.residuals).items():
            console.print(f"  {family} total |residual| {total}")
        for name, residual in list(e.residuals.items())[: cfg.settings.witness_cap]:
            console.print(f"  {name}: {residual}", markup=False)
        return 1
    path = cfg.settings.out_dir / f"lifted-{cfg.certificate.name}"
    write_certificate(x, path, y, cfg.timestamp)
    console.print(f"{len(y)} anchors lifted into {path}")
    return 0


def _verify_command(cfg: RunConfig, pipeline: RefutationPipeline) -> int:
    s = cfg.settings
    t = _tsp_instance(cfg, pipeline)
    x, y = _load_certificate(cfg)
    if y is None and not cfg.materialize:
        try:
            y = _lift(x, t, cfg)
        except LiftRepairError as e:
            logger.warning(f"No conditional flows: {e}")
    families = _families(cfg)
    if cfg.materialize:
        results = {
            f: verify_family(x, y, t, f, s.witness_cap, True, s.full_model_max_nodes)
            for f in families
        }
    else:
        results = verify_families(x, y, t, families, s.witness_cap, s.threads)
    _print_families(results)
    for r in results.values():
        print(r.line())
    return 0 if all(r.satisfied for r in results.values()) else 1


def _export_command(cfg: RunConfig, pipeline: RefutationPipeline) -> int:
    s = cfg.settings
    t = _tsp_instance(cfg, pipeline)
    families = _families(cfg)
    mode = X_ONLY if cfg.x_only else FULL
    path = export_lp(
        t, families, s.out_dir / "model.lp", mode, s.flow_constant, s.full_model_max_nodes
    )
    console.print(f"LP model written to {path}")
    dumped = [f for f in families if mode == FULL or not f.uses_y]
    write_row_dump(
        (
            row
            for f in dumped
            for row in build_family_rows(t, f, s.flow_constant, s.full_model_max_nodes)
        ),
        s.out_dir / "rows.txt",
    )
    return 0


def _report_command(cfg: RunConfig, pipeline: RefutationPipeline) -> int:
    s = cfg.settings
    t = _tsp_instance(cfg, pipeline)
    x, y = _load_certificate(cfg)
    if y is None:
        try:
            y = _lift(x, t, cfg)
        except LiftRepairError as e:
            logger.warning(f"No conditional flows: {e}")
    bound, _ = pipeline.integral_bound(t)
    results = verify_families(x, y, t, witness_cap=s.witness_cap, threads=s.threads)
    verdict = full_verdict(x, y, t, bound, results)
    text, machine = render_report(verdict, results)
    header = [timestamp_header()] if cfg.timestamp else []
    write_lines_atomic(s.out_dir / "report.txt", header + text)
    write_lines_atomic(s.out_dir / "report.machine", header + machine)
    for line in text:
        console.print(line, markup=False, highlight=False)
    return 0 if verdict.verdict is Verdict.REFUTES else 1


HANDLERS = {
    "pipeline": _pipeline_command,
    "solve": _solve_command,
    "hcp": _hcp_command,
    "certificate": _certificate_command,
    "lift": _lift_command,
    "verify": _verify_command,
    "export": _export_command,
    "report": _report_command,
}


def main(argv: Sequence[str] | None = None) -> int:
    """Run one command; 0 = refutation reproduced, 1 = not, 2 = input error."""
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve(args)
    except SystemExit as e:
        return 2 if e.code else 0
    except (ValidationError, ValueError) as e:
        print(f"error: {str(e).splitlines()[0]}", file=sys.stderr)
        return 2
    setup_logging(cfg.settings.log_level)
    pipeline = RefutationPipeline(cfg.settings)
    try:
        return HANDLERS[cfg.command](cfg, pipeline)
    except INPUT_ERRORS as e:
        print(f"error: {str(e).splitlines()[0] if str(e) else type(e).__name__}", file=sys.stderr)
        return 2
    except RefutationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
