"""Configuration management for the refutation toolkit.

Sets configuration from environment variables.
"""

from fractions import Fraction
import os
from pathlib import Path
from typing import Self

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .models import DEFAULT_LARGE, StagePlan, parse_fraction

# Load environment variables from .env file
load_dotenv()

ENV_PREFIX = "REFUTE_"
DEFAULT_FLOW_CONSTANT = Fraction(192)
DEFAULT_BUDGET_SECONDS = 300.0
INTEGER_MODE_DIVISOR = 192


class RefutationConfig(BaseModel):
    """Toolkit configuration."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    # Instance and certificate
    large_cost: int = DEFAULT_LARGE
    flow_constant: Fraction = DEFAULT_FLOW_CONSTANT
    stage_plan: StagePlan = StagePlan.REPAIRED
    integer_mode: bool = False

    # Oracles
    budget_seconds: float = DEFAULT_BUDGET_SECONDS
    dp_max_nodes: int = 25

    # Verification
    threads: int = 1
    full_model_max_nodes: int = 12
    witness_cap: int = 10
    escape_subset_size: int = 6
    lift_cache_size: int = 512
    lift_repair: bool = True
    lift_repair_max_moves: int = 10_000

    # Output
    out_dir: Path = Path("artifacts")
    log_level: str = "INFO"

    @field_validator("flow_constant", mode="before")
    @classmethod
    def parse_flow_constant(cls, v: object) -> Fraction:
        """Accept ints, Fractions and ``num/den`` strings."""
        if isinstance(v, str):
            v = parse_fraction(v)
        elif isinstance(v, int):
            v = Fraction(v)
        if not isinstance(v, Fraction) or v <= 0:
            raise ValueError("Flow constant must be a positive rational")
        return v

    @field_validator(
        "large_cost", "threads", "full_model_max_nodes", "witness_cap", "lift_repair_max_moves"
    )
    @classmethod
    def validate_positive(cls, v: int) -> int:
        """Validate that counts and costs are positive."""
        if v < 1:
            raise ValueError("Value must be a positive integer")
        return v

    @field_validator("budget_seconds")
    @classmethod
    def validate_budget(cls, v: float) -> float:
        """Validate oracle budget."""
        if v <= 0:
            raise ValueError("Budget must be positive")
        return v

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        """Validate log level name."""
        level = v.strip().upper()
        if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"Unknown log level: {v}")
        return level

    @model_validator(mode="after")
    def validate_integer_mode(self) -> Self:
        """Integer mode needs every canonical share integral."""
        F = self.flow_constant
        if self.integer_mode and (F.denominator != 1 or F % INTEGER_MODE_DIVISOR):
            raise ValueError(f"Integer mode needs F divisible by {INTEGER_MODE_DIVISOR}, got {F}")
        return self

    @classmethod
    def from_env(cls) -> "RefutationConfig":
        """Create configuration from environment variables."""

        def env(name: str, default: str) -> str:
            return os.getenv(f"{ENV_PREFIX}{name}", default)

        def flag(name: str, default: bool) -> bool:
            return env(name, str(default)).strip().lower() in ("1", "true", "yes")

        # NOTE: int()/float() raise ValueError on malformed values, same as the CLI.
        return cls(
            large_cost=int(env("LARGE_COST", str(DEFAULT_LARGE))),
            flow_constant=env("FLOW_CONSTANT", str(DEFAULT_FLOW_CONSTANT)),
            stage_plan=StagePlan(env("STAGE_PLAN", StagePlan.REPAIRED.value)),
            integer_mode=flag("INTEGER_MODE", False),
            budget_seconds=float(env("BUDGET", str(DEFAULT_BUDGET_SECONDS))),
            dp_max_nodes=int(env("DP_MAX_NODES", "25")),
            threads=int(env("THREADS", "1")),
            full_model_max_nodes=int(env("FULL_MODEL_MAX_NODES", "12")),
            witness_cap=int(env("WITNESS_CAP", "10")),
            escape_subset_size=int(env("ESCAPE_SUBSET_SIZE", "6")),
            lift_cache_size=int(env("LIFT_CACHE_SIZE", "512")),
            lift_repair=flag("LIFT_REPAIR", True),
            lift_repair_max_moves=int(env("LIFT_REPAIR_MAX_MOVES", "10000")),
            out_dir=Path(env("OUT_DIR", "artifacts")),
            log_level=env("LOG_LEVEL", "INFO"),
        )


COMMANDS = ("pipeline", "solve", "hcp", "certificate", "lift", "verify", "export", "report")


class RunConfig(BaseModel):
    """Resolved command-line arguments for one toolkit command."""

    command: str = "pipeline"
    instance: str = "canonical"
    certificate: Path | None = None
    families: list[str] = []
    timestamp: bool = True
    x_only: bool = False
    write_y: bool = False
    materialize: bool = False
    mutations: bool = False
    compare_plans: bool = False
    count: bool = False
    settings: RefutationConfig = RefutationConfig()

    @field_validator("command")
    @classmethod
    def validate_command(cls, v: str) -> str:
        """Validate subcommand name."""
        if v not in COMMANDS:
            raise ValueError(f"Unknown command: {v}")
        return v

