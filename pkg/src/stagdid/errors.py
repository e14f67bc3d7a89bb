"""Exception hierarchy shared across the package.

Every error carries a short machine-readable ``code`` used by the CLI when it
emits error JSON. ``InputError`` subclasses map to exit status 2 (bad user
input), ``EstimationError`` subclasses to exit status 1 (numerical failure).
"""

from __future__ import annotations


class StagdidError(Exception):
    """Base class for all package errors."""

    code = "error"


class InputError(StagdidError):
    """User-supplied data or configuration is invalid."""

    code = "input-error"


class SchemaError(InputError):
    code = "schema-error"


class UnbalancedPanelError(InputError):
    code = "unbalanced-panel"


class AbsorbingViolationError(InputError):
    code = "absorbing-violation"


class IdentificationError(InputError):
    code = "identification-error"


class SplitError(InputError):
    code = "split-error"


class DimensionError(InputError):
    code = "dimension-error"


class DomainError(InputError):
    code = "domain-error"


class EstimationError(StagdidError):
    """Estimation started but could not be completed."""

    code = "estimation-error"


class SingularSystemError(EstimationError):
    code = "singular-system"

    def __init__(self, message: str, block: str | None = None):
        super().__init__(message)
        self.block = block


class NonConvergenceError(EstimationError):
    code = "non-convergence"
