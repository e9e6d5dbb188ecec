"""Koopman policy iteration for zero-sum differential games.

The outer loop improves the controller, the inner loop finds the worst-case
adversary for the current controller. Each policy evaluation solves the
linear equation ``L v = b`` where ``L`` is a Koopman generator of the closed
loop and ``b`` projects the running reward onto the dictionary.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np

from .basis import MonomialDictionary
from .dynamics import (ControlAffineSystem, FeedbackPolicy, SamplingConfig, closed_loop_field,
                       generate_snapshots, sample_states)
from .errors import NonFiniteValue, SolverFailure
from .koopman import (GeneratorMatrix, RegressionSettings, edmd_operator, generator_from_operator,
                      generator_model_based, project_function, truncated_lstsq)

SOLVER_FAILURE_RATIO = 0.1


@dataclass
class GameCost:
    """Running cost ``q(x) + r u^2 - gamma^2 w^2``; ``gamma = inf`` drops the adversary."""

    state_cost: Callable[[np.ndarray], np.ndarray]
    control_weight: float = 1.0
    gamma: float = math.inf

    def __post_init__(self):
        if not self.control_weight > 0:
            raise ValueError("control weight r must be positive")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive (or inf)")

    @property
    def hjb(self) -> bool:
        return math.isinf(self.gamma)

    def check(self, states, dim: int):
        """Validate ``q(0) = 0`` and ``q >= 0`` on the given states."""
        if float(self.state_cost(np.zeros(dim))) != 0.0:
            raise ValueError("state cost must vanish at the origin")
        if np.any(np.asarray(self.state_cost(states)) < 0):
            raise ValueError("state cost must be non-negative")


@dataclass
class ValueFunction:
    coefficients: np.ndarray
    dictionary: MonomialDictionary

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float).ravel()
        if self.coefficients.shape != (self.dictionary.size,):
            raise ValueError("coefficient vector length must equal dictionary size")
        if not np.all(np.isfinite(self.coefficients)):
            raise ValueError("value function coefficients must be finite")

    def __call__(self, x) -> np.ndarray:
        return self.dictionary.eval(x) @ self.coefficients

    def gradient(self, x) -> np.ndarray:
        return self.dictionary.gradient_combination(self.coefficients, x)


@dataclass
class KpiConfig:
    mode: str = "model_based"
    sampling: Optional[SamplingConfig] = None
    regression: RegressionSettings = dc_field(default_factory=RegressionSettings)
    dt: float = 0.01
    substeps: int = 10
    collocation_points: int = 500
    inner_tol: float = 1e-6
    outer_tol: float = 1e-6
    inner_max: int = 50
    outer_max: int = 50
    threads: Optional[int] = None

    def __post_init__(self):
        if self.mode not in ("model_based", "data_driven"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not (self.inner_tol > 0 and self.outer_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.inner_max < 1 or self.outer_max < 1:
            raise ValueError("iteration caps must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.substeps < 1 or self.collocation_points < 1:
            raise ValueError("substeps and collocation_points must be >= 1")


@dataclass
class IterationRecord:
    outer: int
    inner: int
    coefficients: np.ndarray
    residual: float
    delta: float
    wall_time: float


@dataclass
class KpiResult:
    final_value: ValueFunction
    trace: list
    converged: bool
    termination_reason: str
    control: Optional[FeedbackPolicy] = None
    adversary: Optional[FeedbackPolicy] = None

    @property
    def outer_iterations(self) -> int:
        return self.trace[-1].outer + 1 if self.trace else 0

    @property
    def wall_time(self) -> float:
        return sum(r.wall_time for r in self.trace)


def build_rhs(cost: GameCost, k: FeedbackPolicy, l: FeedbackPolicy, samples) -> np.ndarray:
    """Per-sample ``-q - r k^2 + gamma^2 l^2`` (adversary term omitted when gamma is inf)."""
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    if len(X) == 0:
        raise ValueError("need at least one sample")
    kx = k(X)
    values = -np.asarray(cost.state_cost(X), dtype=float) - cost.control_weight * kx**2
    if not cost.hjb:
        lx = l(X)
        values = values + cost.gamma**2 * lx**2
    if not np.all(np.isfinite(values)):
        raise NonFiniteValue("right-hand side is not finite at some sample")
    return values


def policy_evaluation(L, b, cutoff: float = 1e-10) -> tuple[np.ndarray, float]:
    """Least-squares solve of ``L v = b``; returns ``(v, ||L v - b||)``."""
    Lm = L.entries if isinstance(L, GeneratorMatrix) else np.asarray(L, dtype=float)
    b = np.asarray(b, dtype=float).ravel()
    if Lm.shape != (len(b), len(b)):
        raise ValueError("L must be square with size len(b)")
    v = truncated_lstsq(Lm, b, cutoff).solution
    residual = float(np.linalg.norm(Lm @ v - b))
    if residual > SOLVER_FAILURE_RATIO * np.linalg.norm(b):
        raise SolverFailure(f"policy evaluation residual {residual:.3g} exceeds "
                            f"{SOLVER_FAILURE_RATIO:.0%} of ||b|| = {np.linalg.norm(b):.3g}")
    return v, residual


def _coefficients(v) -> tuple[np.ndarray, MonomialDictionary]:
    return v.coefficients, v.dictionary


def control_update(v: ValueFunction, sys: ControlAffineSystem, r: float) -> FeedbackPolicy:
    """Controller ``k(x) = -1/(2r) g(x) . grad V(x)``."""
    c, d = _coefficients(v)
    return FeedbackPolicy.value_gradient(d, c, sys.control_field, -0.5 / r, label="control_update")


def adversary_update(v: ValueFunction, sys: ControlAffineSystem, gamma: float) -> FeedbackPolicy:
    """Adversary ``l(x) = 1/(2 gamma^2) h(x) . grad V(x)``."""
    if math.isinf(gamma):
        raise ValueError("adversary_update is undefined for gamma = inf")
    c, d = _coefficients(v)
    return FeedbackPolicy.value_gradient(d, c, sys.adversary_field, 0.5 / gamma**2,
                                         label="adversary_update")


def hji_residual(v: ValueFunction, sys: ControlAffineSystem, cost: GameCost, test_states) -> float:
    """RMS of ``q + f.dV - (1/4r)(g.dV)^2 + (1/4 gamma^2)(h.dV)^2`` over the test states.

    Uses only the vector fields and the exact value gradient.
    """
    X = np.atleast_2d(np.asarray(test_states, dtype=float))
    dV = v.gradient(X)
    dot = lambda F: np.sum(F(X) * dV, axis=-1)  # noqa: E731
    res = np.asarray(cost.state_cost(X), dtype=float) + dot(sys.drift)
    res = res - dot(sys.control_field) ** 2 / (4.0 * cost.control_weight)
    if not cost.hjb:
        res = res + dot(sys.adversary_field) ** 2 / (4.0 * cost.gamma**2)
    return float(np.sqrt(np.mean(res**2)))


def _generator(sys, dictionary, k, l, cfg: KpiConfig, collocation):
    fc = closed_loop_field(sys, k, l)
    if cfg.mode == "model_based":
        L = generator_model_based(fc, dictionary, collocation, cfg.regression)
        return L, collocation
    data = generate_snapshots(fc, cfg.sampling, cfg.dt, cfg.substeps,
                              min_pairs=int(np.ceil(cfg.regression.min_samples_factor * dictionary.size)),
                              threads=cfg.threads)
    L = generator_from_operator(edmd_operator(data, dictionary, cfg.regression))
    return L, data.x_points


def run_kpi(sys: ControlAffineSystem, cost: GameCost, dictionary: MonomialDictionary,
            k0: FeedbackPolicy, cfg: KpiConfig) -> KpiResult:
    """Nested policy iteration; see the module docstring.

    ``k0`` must be admissible (stabilizing); this is not checked.
    """
    if dictionary.dim != sys.dim:
        raise ValueError("dictionary dimension does not match system dimension")
    if cfg.sampling is None:
        raise ValueError("KpiConfig.sampling is required")
    collocation = None
    if cfg.mode == "model_based":
        collocation = sample_states(cfg.sampling, cfg.collocation_points)
        cost.check(collocation, sys.dim)

    trace: list[IterationRecord] = []
    prev = np.zeros(dictionary.size)
    v_outer_prev = None
    k = k0
    l = FeedbackPolicy.zero()
    converged = False
    reason = "max_iterations"

    def record(i, j, v, residual, t0):
        nonlocal prev
        delta = float(np.max(np.abs(v - prev)))
        trace.append(IterationRecord(i, j, v.copy(), residual, delta, time.perf_counter() - t0))
        prev = v

    for i in range(cfg.outer_max):
        l = FeedbackPolicy.zero()
        v_inner_prev = None
        inner_cap = 1 if cost.hjb else cfg.inner_max
        for j in range(inner_cap):
            t0 = time.perf_counter()
            L, pts = _generator(sys, dictionary, k, l, cfg, collocation)
            rhs = build_rhs(cost, k, l, pts)
            b = project_function(rhs, dictionary, pts, cfg.regression).coefficients
            try:
                v, residual = policy_evaluation(L, b, cfg.regression.svd_cutoff)
            except SolverFailure as exc:
                partial = KpiResult(ValueFunction(prev, dictionary), trace, False, "solver_failure", k, l)
                raise SolverFailure(f"outer {i}, inner {j}: {exc}", partial) from exc
            vf = ValueFunction(v, dictionary)
            if not cost.hjb:
                l = adversary_update(vf, sys, cost.gamma)
            record(i, j, v, residual, t0)
            if v_inner_prev is not None and np.max(np.abs(v - v_inner_prev)) < cfg.inner_tol:
                break
            v_inner_prev = v
        v_final = trace[-1].coefficients
        if v_outer_prev is not None and np.max(np.abs(v_final - v_outer_prev)) < cfg.outer_tol:
            converged = True
            reason = "converged"
            break
        v_outer_prev = v_final
        k = control_update(ValueFunction(v_final, dictionary), sys, cost.control_weight)

    final = ValueFunction(trace[-1].coefficients, dictionary)
    k_final = control_update(final, sys, cost.control_weight)
    l_final = FeedbackPolicy.zero() if cost.hjb else adversary_update(final, sys, cost.gamma)
    return KpiResult(final, trace, converged, reason, k_final, l_final)
