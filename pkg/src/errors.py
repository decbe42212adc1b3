"""Exceptions raised across the refutation toolkit."""

from fractions import Fraction
from typing import Any


class RefutationError(Exception):
    """Base class for toolkit errors."""

    pass


class InstanceFormatError(RefutationError):
    """Raised when an instance or certificate file cannot be parsed."""

    def __init__(self, message: str, line_number: int = 0):
        if line_number:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class ReductionError(RefutationError):
    """Raised when a reduction or enlargement precondition fails."""

    pass


class OracleError(RefutationError):
    """Raised when an oracle cannot handle the given instance."""

    pass


class OracleTimeoutError(OracleError):
    """Raised when an oracle exceeds its time budget."""

    def __init__(
        self,
        message: str,
        elapsed: float = 0.0,
        incumbent: Any | None = None,
    ):
        super().__init__(message)
        self.elapsed = elapsed
        self.incumbent = incumbent


class ModelSizeError(RefutationError):
    """Raised when full model materialisation exceeds the size cap."""

    pass


class CertificateError(RefutationError):
    """Raised when the certificate generator's structural precondition fails."""

    pass


class LiftRepairError(CertificateError):
    """Raised when a conditional-flow lift cannot be built from x."""

    def __init__(self, message: str, residuals: dict[str, Fraction] | None = None):
        super().__init__(message)
        self.residuals = residuals or {}

    @property
    def by_family(self) -> dict[str, Fraction]:
        """Total absolute residual per constraint family."""
        return family_residuals(self.residuals)


def family_residuals(residuals: dict[str, Fraction]) -> dict[str, Fraction]:
    """Sum |residual| over rows named ``<family>[...]``."""
    totals: dict[str, Fraction] = {}
    for row, r in residuals.items():
        family = row.split("[", 1)[0]
        totals[family] = totals.get(family, Fraction(0)) + abs(r)
    return totals


class VerdictError(RefutationError):
    """Raised when a verdict is requested without oracle provenance."""

    pass
