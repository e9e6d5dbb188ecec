"""Finite-dimensional Koopman operator and generator approximations.

Convention used throughout: matrices act on *coefficient vectors*. If
``phi = c @ Psi`` then the coefficients of ``U_dt phi`` are ``K @ c`` and the
coefficients of the generator applied to ``phi`` are ``L @ c``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .basis import MonomialDictionary
from .dynamics import Field, SnapshotData
from .errors import InsufficientData, PoorFitWarning, RankDeficientWarning

POOR_FIT_THRESHOLD = 0.1


@dataclass(frozen=True)
class RegressionSettings:
    svd_cutoff: float = 1e-10
    min_samples_factor: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.svd_cutoff < 1.0:
            raise ValueError("svd_cutoff must lie in (0, 1)")
        if not self.min_samples_factor >= 1.0:
            raise ValueError("min_samples_factor must be >= 1")

    def require(self, count: int, size: int):
        needed = int(np.ceil(self.min_samples_factor * size))
        if count < needed:
            raise InsufficientData(f"{count} samples for {size} basis functions; need at least {needed}")


@dataclass
class LstsqSolution:
    solution: np.ndarray
    rank: int
    singular_values: np.ndarray

    @property
    def condition_number(self) -> float:
        s = self.singular_values
        return float(s[0] / s[-1]) if s[-1] > 0 else float("inf")

    @property
    def rank_deficient(self) -> bool:
        return self.rank < len(self.singular_values)


def truncated_lstsq(A: np.ndarray, B: np.ndarray, cutoff: float = 1e-10) -> LstsqSolution:
    """Minimum-norm least-squares solution ``A^+ B`` with relative SVD truncation.

    Singular values below ``cutoff * s_max`` are dropped.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        shape = (A.shape[1],) + B.shape[1:]
        return LstsqSolution(np.zeros(shape), 0, s)
    r = int(np.sum(s > cutoff * s[0]))
    coef = U[:, :r].T @ B
    coef = coef / (s[:r] if B.ndim == 1 else s[:r, None])
    return LstsqSolution(Vt[:r].T @ coef, r, s)


@dataclass
class GeneratorMatrix:
    """Approximate Koopman generator acting on dictionary coefficient vectors."""

    entries: np.ndarray
    method: str
    dt: Optional[float] = None
    sample_count: int = 0
    condition_number: float = float("nan")
    regression_residual: float = float("nan")
    rank_deficient: bool = False

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=float)
        if self.entries.ndim != 2 or self.entries.shape[0] != self.entries.shape[1]:
            raise ValueError("generator matrix must be square")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("generator matrix has non-finite entries")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def meta(self) -> dict:
        return {
            "method": self.method,
            "dt": self.dt,
            "sample_count": self.sample_count,
            "condition_number": self.condition_number,
            "regression_residual": self.regression_residual,
            "rank_deficient": self.rank_deficient,
        }


@dataclass
class KoopmanOperator:
    """EDMD estimate ``K = G^+ A`` plus regression diagnostics."""

    matrix: np.ndarray
    dt: float
    sample_count: int
    condition_number: float
    regression_residual: float
    rank_deficient: bool


def edmd_operator(data: SnapshotData, dictionary: MonomialDictionary,
                  settings: RegressionSettings = RegressionSettings()) -> KoopmanOperator:
    M = len(data)
    N = dictionary.size
    settings.require(M, N)
    PX = dictionary.eval(data.x_points)
    PY = dictionary.eval(data.y_points)
    G = PX.T @ PX / M
    A = PX.T @ PY / M
    sol = truncated_lstsq(G, A, settings.svd_cutoff)
    if sol.rank_deficient:
        warnings.warn(f"EDMD Gram matrix truncated to rank {sol.rank} of {N}", RankDeficientWarning)
    K = sol.solution
    return KoopmanOperator(
        matrix=K,
        dt=data.dt,
        sample_count=M,
        condition_number=sol.condition_number,
        regression_residual=float(np.linalg.norm(G @ K - A)),
        rank_deficient=sol.rank_deficient,
    )


def generator_from_operator(K, dt: Optional[float] = None) -> GeneratorMatrix:
    """``L = (K - I) / dt``; accepts a bare matrix or a :class:`KoopmanOperator`."""
    if isinstance(K, KoopmanOperator):
        op = K
        dt = op.dt if dt is None else dt
        K = op.matrix
    else:
        op = None
    if dt is None or not dt > 0:
        raise ValueError("dt must be positive")
    K = np.asarray(K, dtype=float)
    L = (K - np.eye(K.shape[0])) / dt
    if op is None:
        return GeneratorMatrix(L, "edmd", dt=dt)
    return GeneratorMatrix(L, "edmd", dt=dt, sample_count=op.sample_count,
                           condition_number=op.condition_number,
                           regression_residual=op.regression_residual,
                           rank_deficient=op.rank_deficient)


def generator_model_based(field: Field, dictionary: MonomialDictionary, samples,
                          settings: RegressionSettings = RegressionSettings()) -> GeneratorMatrix:
    """Regress the exact Lie derivatives of the dictionary back onto the dictionary.

    Solves ``Psi_bar @ L ~= D_bar`` where row ``m`` of ``D_bar`` holds
    ``field(x_m) . grad psi_i(x_m)``. The solution ``L`` is the transpose of
    the term-wise expansion matrix, i.e. it acts on coefficient vectors.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    settings.require(len(X), dictionary.size)
    Psi = dictionary.eval(X)
    D = dictionary.directional_derivative(field, X)
    sol = truncated_lstsq(Psi, D, settings.svd_cutoff)
    if sol.rank_deficient:
        warnings.warn(f"collocation matrix truncated to rank {sol.rank} of {dictionary.size}",
                      RankDeficientWarning)
    L = sol.solution
    resid = float(np.linalg.norm(Psi @ L - D))
    return GeneratorMatrix(L, "model_based", sample_count=len(X),
                           condition_number=sol.condition_number,
                           regression_residual=resid, rank_deficient=sol.rank_deficient)


@dataclass
class Projection:
    coefficients: np.ndarray
    relative_residual: float
    poor_fit: bool
    rank_deficient: bool = False


def project_function(values, dictionary: MonomialDictionary, samples,
                     settings: RegressionSettings = RegressionSettings()) -> Projection:
    """Least-squares coefficients ``b`` with ``b @ Psi(x_m) ~= values[m]``."""
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    y = np.asarray(values, dtype=float).ravel()
    if len(y) != len(X):
        raise ValueError("values and samples must have equal length")
    settings.require(len(X), dictionary.size)
    Psi = dictionary.eval(X)
    sol = truncated_lstsq(Psi, y, settings.svd_cutoff)
    b = sol.solution
    norm_y = float(np.linalg.norm(y))
    resid = float(np.linalg.norm(Psi @ b - y))
    rel = resid / norm_y if norm_y > 0 else resid
    poor = rel > POOR_FIT_THRESHOLD
    if poor:
        warnings.warn(f"projection relative residual {rel:.3g} exceeds {POOR_FIT_THRESHOLD}",
                      PoorFitWarning)
    return Projection(b, rel, poor, sol.rank_deficient)
