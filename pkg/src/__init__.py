"""Counterexample, certificate and exact verifier for a staged-flow TSP relaxation."""

from pathlib import Path
import tomllib

from .certificate import (
    ConditionalFlowSet,
    SparseFlow,
    generate_x_certificate,
    lift_conditional_flows,
)
from .config import RefutationConfig
from .errors import RefutationError
from .instances import canonical_counterexample, canonical_hcp_seed
from .models import ConstraintFamily, TspInstance, Verdict
from .pipeline import RefutationPipeline
from .verifier import full_verdict, verify_families


def _get_version() -> str:
    """Get version from pyproject.toml."""
    try:
        pyproject_path = Path(__file__).parent.parent / "pyproject.toml"
        with open(pyproject_path, "rb") as f:
            data = tomllib.load(f)
        return data["project"]["version"]
    # NOTE: should not hit this ever. But let's be safe.
    except (FileNotFoundError, KeyError, tomllib.TOMLDecodeError):
        return "0.1.0"  # fallback version


__version__ = _get_version()

__all__ = [
    "RefutationPipeline",
    "RefutationConfig",
    "RefutationError",
    "TspInstance",
    "ConstraintFamily",
    "Verdict",
    "SparseFlow",
    "ConditionalFlowSet",
    "canonical_counterexample",
    "canonical_hcp_seed",
    "generate_x_certificate",
    "lift_conditional_flows",
    "verify_families",
    "full_verdict",
]
