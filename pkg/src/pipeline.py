"""Refutation pipeline that composes the individual stages."""

import logging
from pathlib import Path

from pydantic import BaseModel, ConfigDict

from .artifacts import timestamp_header, write_lines_atomic
from .certificate import (
    CertificateDiagnostics,
    ConditionalFlowSet,
    SparseFlow,
    certificate_diagnostics,
    generate_x_certificate,
    lift_conditional_flows,
    tour_certificate,
    write_certificate,
)
from .config import RefutationConfig
from .errors import (
    CertificateError,
    LiftRepairError,
    OracleTimeoutError,
    VerdictError,
    family_residuals,
)
from .instances import (
    canonical_counterexample,
    canonical_hcp_seed,
    load_tsp_instance,
    save_tsp_instance,
)
from .lp_model import check_symmetry
from .models import (
    ConstraintFamily,
    FamilyResidual,
    HcpInstance,
    IntegralBound,
    RefutationVerdict,
    StagePlan,
    SymmetryReport,
    TourResult,
    TspInstance,
    Verdict,
)
from .oracles import exact_tsp
from .reductions import canonical_enlargement, hcp_to_tsp, support_graph
from .verifier import (
    MutationReport,
    bound_from_cut,
    bound_from_seed,
    bound_from_tour,
    combine_bounds,
    family_matrix,
    full_verdict,
    mutation_suite,
    render_report,
    verify_families,
)

logger = logging.getLogger(__name__)

CANONICAL = "canonical"
SEED = "seed"


class PipelineResult(BaseModel):
    """Outcome of one pipeline run."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    verdict: RefutationVerdict
    results: dict[ConstraintFamily, FamilyResidual]
    symmetry: SymmetryReport | None = None
    mutations: MutationReport | None = None
    artifacts: list[Path] = []
    notes: list[str] = []

    @property
    def exit_code(self) -> int:
        return 0 if self.verdict.verdict is Verdict.REFUTES else 1


class RefutationPipeline:
    """Seed -> enlargement -> oracle -> certificate -> lift -> verify -> verdict."""

    def __init__(self, config: RefutationConfig | None = None):
        self.config = config or RefutationConfig.from_env()
        self._seed_tour: TourResult | None = None

    def load_instance(self, instance: Path | str | None = None) -> TspInstance:
        """The canonical instance, the costed seed, or one loaded from a file."""
        if instance is None or str(instance) == CANONICAL:
            return canonical_counterexample(self.config.large_cost)
        if str(instance) == SEED:
            return hcp_to_tsp(canonical_hcp_seed(), 1, self.config.large_cost)
        return load_tsp_instance(Path(instance), self.config.large_cost)

    def is_canonical(self, t: TspInstance) -> bool:
        return t == canonical_counterexample(t.large)

    def seed_tour(self, seed: HcpInstance | None = None) -> TourResult:
        """Exact optimum of the seed under the plain small/LARGE costing."""
        if seed is None and self._seed_tour is not None:
            return self._seed_tour
        seed_tsp = hcp_to_tsp(seed or canonical_hcp_seed(), 1, self.config.large_cost)
        tour = exact_tsp(seed_tsp, self.config.budget_seconds, dp_max_nodes=self.config.dp_max_nodes)
        logger.info(f"Seed optimum {tour.value} with {tour.large_arc_count} large arcs")
        if seed is None:
            self._seed_tour = tour
        return tour

    def integral_bound(self, t: TspInstance) -> tuple[IntegralBound, TourResult | None]:
        """Exact optimum when the DP reaches, else layered lower bounds."""
        cfg = self.config
        if t.n <= cfg.dp_max_nodes:
            tour = exact_tsp(t, cfg.budget_seconds, dp_max_nodes=cfg.dp_max_nodes)
            return bound_from_tour(t, tour), tour
        if self.is_canonical(t):
            if canonical_enlargement(t.large).instance != t:
                raise VerdictError("Seed enlargement does not reproduce the instance")
            seed = canonical_hcp_seed()
            bounds = [bound_from_seed(t, self.seed_tour()), bound_from_cut(t, seed)]
            return combine_bounds(bounds), None
        bounds = [bound_from_cut(t, support_graph(t))]
        try:
            tour = exact_tsp(t, cfg.budget_seconds, dp_max_nodes=cfg.dp_max_nodes)
            bounds.append(bound_from_tour(t, tour))
        except OracleTimeoutError as e:
            logger.warning(f"Branch and bound did not close: {e}")
            tour = None
        return combine_bounds(bounds), tour

    def certificate(
        self, t: TspInstance, stage_plan: StagePlan | None = None
    ) -> SparseFlow:
        cfg = self.config
        return generate_x_certificate(
            t, cfg.flow_constant, stage_plan or cfg.stage_plan, integer_mode=cfg.integer_mode
        )

    def lift(self, x: SparseFlow, t: TspInstance) -> ConditionalFlowSet:
        cfg = self.config
        return lift_conditional_flows(
            x,
            t,
            cache_size=cfg.lift_cache_size,
            repair=cfg.lift_repair,
            threads=cfg.threads,
            max_moves=cfg.lift_repair_max_moves,
            strict=False,
        )

    def verify(
        self, x: SparseFlow, y: ConditionalFlowSet | None, t: TspInstance
    ) -> dict[ConstraintFamily, FamilyResidual]:
        return verify_families(
            x, y, t, witness_cap=self.config.witness_cap, threads=self.config.threads
        )

    def run(
        self,
        instance: Path | str | None = None,
        stage_plan: StagePlan | None = None,
        write_y: bool = False,
        timestamp: bool = True,
        mutations: bool = False,
    ) -> PipelineResult:
        """Run every stage and write instance, certificate and report files."""
        cfg = self.config
        plan = StagePlan(stage_plan or cfg.stage_plan)
        out = cfg.out_dir
        t = self.load_instance(instance)
        artifacts = [save_tsp_instance(t, out / "instance.txt", timestamp)]
        bound, tour = self.integral_bound(t)
        notes: list[str] = []

        diagnostics: CertificateDiagnostics | None = None
        try:
            x = self.certificate(t, plan)
            diagnostics = certificate_diagnostics(x, t, cfg.escape_subset_size)
        except CertificateError as e:
            if tour is None:
                raise
            logger.warning(f"No fractional certificate: {e}; checking the optimal tour")
            notes.append(f"certificate precondition failed: {e}")
            x = tour_certificate(t, tour.order, cfg.flow_constant)

        y: ConditionalFlowSet | None
        try:
            y = self.lift(x, t)
        except LiftRepairError as e:
            logger.warning(f"Conditional flows not built: {e}")
            notes.append(f"lift skipped: {e}")
            y = None
        if y is not None and y.moves:
            notes.append(f"lift repair: {sum(y.moves.values())} reroutes on {len(y.moves)} anchors")
        if y is not None and y.unresolved:
            left = ", ".join(
                f"{family}={total}" for family, total in family_residuals(y.unresolved).items()
            )
            logger.warning(f"Lift repair left {len(y.unresolved)} visit rows")
            notes.append(f"lift repair incomplete: {len(y.unresolved)} visit rows left ({left})")

        results = self.verify(x, y, t)
        symmetry = check_symmetry(y) if y is not None else None
        verdict = full_verdict(x, y, t, bound, results)
        mutation_report = None
        if mutations and y is not None:
            mutation_report = mutation_suite(x, y, t, integer_mode=cfg.integer_mode)

        extra = [f"Note: {n}" for n in notes]
        if mutation_report is not None:
            extra += ["Mutations:"] + [f"  {line}" for line in mutation_report.lines()]
        text, machine = render_report(verdict, results, symmetry, extra, diagnostics)
        header = [timestamp_header()] if timestamp else []
        artifacts.append(
            write_certificate(x, out / f"certificate-{plan}.txt", y if write_y else None, timestamp)
        )
        artifacts.append(write_lines_atomic(out / f"report-{plan}.txt", header + text))
        artifacts.append(write_lines_atomic(out / f"report-{plan}.machine", header + machine))
        return PipelineResult(
            verdict=verdict,
            results=results,
            symmetry=symmetry,
            mutations=mutation_report,
            artifacts=artifacts,
            notes=notes,
        )

    def compare_plans(
        self, instance: Path | str | None = None, timestamp: bool = True
    ) -> dict[StagePlan, PipelineResult]:
        """Run both stage plans and write the per-family matrix."""
        runs = {plan: self.run(instance, plan, timestamp=timestamp) for plan in StagePlan}
        lines = family_matrix({str(plan): r.results for plan, r in runs.items()})
        lines += [f"verdict {plan}: {r.verdict.label}" for plan, r in runs.items()]
        header = [timestamp_header()] if timestamp else []
        path = write_lines_atomic(self.config.out_dir / "plan-matrix.txt", header + lines)
        for r in runs.values():
            r.artifacts.append(path)
        return runs
