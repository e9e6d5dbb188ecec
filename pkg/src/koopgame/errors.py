"""Exception and warning types raised across the package."""


class KpiError(Exception):
    """Base class for all errors raised by koopgame."""


class NonFiniteState(KpiError):
    """An integrated state acquired a NaN or infinite component."""


class NonFiniteValue(KpiError):
    """A cost or policy evaluated to a non-finite number."""


class InsufficientData(KpiError):
    """Too few samples (or too many discarded snapshot pairs) for a regression."""


class SolverFailure(KpiError):
    """Policy evaluation could not represent the closed-loop cost equation.

    When raised from :func:`koopgame.kpi.run_kpi` the partial result is
    attached as ``result``.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class NoConvergence(KpiError):
    pass


class NonStabilizable(KpiError):
    pass


class Uncontrollable(KpiError):
    pass


class ConfigError(KpiError):
    """Invalid run configuration; ``field`` names the offending entry."""

    def __init__(self, message, field=None):
        if field:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field


class RankDeficientWarning(UserWarning):
    """Truncated SVD discarded one or more directions."""


class PoorFitWarning(UserWarning):
    """Least-squares projection left a relative residual above 10%."""
