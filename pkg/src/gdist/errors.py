"""Exception hierarchy shared by every module of :mod:`gdist`."""

from __future__ import annotations


class GDistError(Exception):
    """Base class; ``details`` is a JSON-serializable diagnostic payload."""

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.details = details


class NonIntegrable(GDistError):
    pass


class AtomDetected(GDistError):
    pass


class DimensionMismatch(GDistError, ValueError):
    pass


class InvalidParameters(GDistError, ValueError):
    pass


class ResourceLimit(GDistError):
    pass


class RegressionSingular(GDistError):
    pass


class NumericalFailure(GDistError):
    """NaN or infinity escaped into a backward induction."""


class PreconditionViolated(GDistError):
    pass


class QuadratureOverflow(GDistError):
    pass


class InadmissibleDistribution(GDistError):
    pass


class RootBracketFailure(GDistError):
    pass


class LawMismatch(GDistError):
    pass


class HypothesisViolated(GDistError):
    pass


class BudgetInfeasible(GDistError):
    pass
