"""Benchmark problems with analytic references, plus the GARE and pole-placement oracles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .basis import MonomialDictionary
from .dynamics import ControlAffineSystem, FeedbackPolicy, SamplingConfig
from .errors import NoConvergence, NonStabilizable, Uncontrollable
from .koopman import RegressionSettings
from .kpi import GameCost, KpiConfig, ValueFunction, hji_residual

F16_A = np.array([
    [-1.01887, 0.90506, -0.00215],
    [0.82225, -1.07741, -0.17555],
    [0.0, 0.0, -1.0],
])
F16_B = np.array([0.0, 0.0, 1.0])
F16_H = np.array([1.0, 0.0, 0.0])
F16_POLES = (-2.0, -1.0, -0.5)
# printed to three decimals
F16_P_PUBLISHED = np.array([
    [1.657, 1.395, -0.166],
    [1.395, 1.657, -0.180],
    [-0.166, -0.180, 0.437],
])
F16_V_PUBLISHED = np.array([1.7293, 2.7756, -0.343, 1.733, -0.373, 0.544])

EX2_V_PUBLISHED_HJB = np.array([0.0, 0.505, 0.0, 1.00, 0.005, 0.0, 0.0])
EX2_V_PUBLISHED_HJI = np.array([0.0, 0.504, -0.002, 1.005, 0.003, 0.001, 0.003])
EX3_V_PUBLISHED = np.array([0.033, 0.024, -0.003, -0.023, 0.588, -0.008, 0.301])


@dataclass
class BenchmarkProblem:
    name: str
    system: ControlAffineSystem
    cost: GameCost
    dictionary: MonomialDictionary
    initial_control: FeedbackPolicy
    default_config: KpiConfig
    reference: Optional[dict] = None
    notes: list = dc_field(default_factory=list)


def quadratic_state_cost(x):
    x = np.asarray(x, dtype=float)
    return np.sum(x * x, axis=-1)


def quartic_state_cost(x):
    x = np.asarray(x, dtype=float)
    return np.sum(x**4, axis=-1)


# ---------------------------------------------------------------- linear algebra oracles

def _as_col(v) -> np.ndarray:
    return np.asarray(v, dtype=float).reshape(-1, 1)


def gare_residual(P, A, B, H, Q, r: float, gamma: float) -> float:
    """Frobenius norm of ``A'P + PA - P (BB'/r - HH'/gamma^2) P + Q``."""
    A = np.asarray(A, dtype=float)
    P = np.asarray(P, dtype=float)
    S = _riccati_weight(B, H, r, gamma)
    return float(np.linalg.norm(A.T @ P + P @ A - P @ S @ P + np.asarray(Q, dtype=float)))


def _riccati_weight(B, H, r, gamma):
    B, H = _as_col(B), _as_col(H)
    S = B @ B.T / r
    if not math.isinf(gamma):
        S = S - H @ H.T / gamma**2
    return S


def solve_lyapunov_kron(Acl: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Solve ``Acl' X + X Acl + C = 0`` through the vectorized Kronecker system."""
    n = Acl.shape[0]
    I = np.eye(n)
    M = np.kron(I, Acl.T) + np.kron(Acl.T, I)
    X = np.linalg.solve(M, -C.reshape(-1, order="F")).reshape(n, n, order="F")
    return 0.5 * (X + X.T)


def _check_stabilizable(A, B):
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if lam.real >= 0:
            M = np.hstack([A - lam * np.eye(n), _as_col(B).astype(complex)])
            if np.linalg.matrix_rank(M) < n:
                raise NonStabilizable(f"unstable mode {lam:.4g} is not controllable")


def gare_solve(A, B, H, Q, r: float = 1.0, gamma: float = math.inf,
               tol: float = 1e-10, max_iter: int = 100, history: Optional[list] = None) -> np.ndarray:
    """Minimal PSD solution of the game algebraic Riccati equation by Newton-Kleinman.

    Starts from the stabilizing LQ (``gamma = inf``) solution. If ``history``
    is a list, the residual after each Newton step is appended to it.
    """
    A = np.asarray(A, dtype=float)
    Q = np.asarray(Q, dtype=float)
    _check_stabilizable(A, B)
    try:
        P = scipy.linalg.solve_continuous_are(A, _as_col(B), Q, np.array([[r]]))
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NonStabilizable(f"LQ Riccati equation has no stabilizing solution: {exc}") from exc
    S = _riccati_weight(B, H, r, gamma)
    res = gare_residual(P, A, B, H, Q, r, gamma)
    for _ in range(max_iter):
        if res <= tol:
            return P
        Acl = A - S @ P
        if np.max(np.linalg.eigvals(Acl).real) >= 0:
            raise NoConvergence("Newton iterate lost closed-loop stability; gamma is likely too small")
        P = solve_lyapunov_kron(Acl, Q + P @ S @ P)
        res = gare_residual(P, A, B, H, Q, r, gamma)
        if history is not None:
            history.append(res)
        if not np.isfinite(res):
            break
    if res <= tol:
        return P
    raise NoConvergence(f"GARE residual {res:.3g} after {max_iter} Newton steps")


def pole_placement(A, B, poles) -> np.ndarray:
    """Ackermann gain ``g`` such that ``A - B g'`` has the requested (real) eigenvalues."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(B, dtype=float).ravel()
    n = A.shape[0]
    poles = np.asarray(poles)
    if len(poles) != n:
        raise ValueError("need exactly n poles")
    if np.any(np.iscomplex(poles)):
        raise ValueError("only real poles are supported")
    ctrb = np.column_stack([np.linalg.matrix_power(A, k) @ b for k in range(n)])
    if np.linalg.matrix_rank(ctrb) < n:
        raise Uncontrollable("(A, B) is not controllable")
    coeffs = np.poly(poles.real)
    phi = sum(c * np.linalg.matrix_power(A, n - k) for k, c in enumerate(coeffs))
    e_n = np.zeros(n)
    e_n[-1] = 1.0
    return np.linalg.solve(ctrb.T, e_n) @ phi


def quadratic_coefficients(P, dictionary: MonomialDictionary) -> np.ndarray:
    """Coefficients of ``x' P x`` in a dictionary of quadratic monomials."""
    P = np.asarray(P, dtype=float)
    v = np.zeros(dictionary.size)
    for idx, row in enumerate(dictionary.exponents):
        nz = np.flatnonzero(row)
        if row.sum() != 2:
            raise ValueError("dictionary must contain only quadratic monomials")
        if len(nz) == 1:
            v[idx] = P[nz[0], nz[0]]
        else:
            v[idx] = 2.0 * P[nz[0], nz[1]]
    return v


# ---------------------------------------------------------------- problems

F16_DICT = [[2, 0, 0], [1, 1, 0], [1, 0, 1], [0, 2, 0], [0, 1, 1], [0, 0, 2]]
EX2_DICT = [[2, 1], [2, 0], [1, 1], [0, 2], [2, 2], [4, 0], [0, 4]]
EX3_DICT = [[1, 0], [0, 1], [2, 1], [3, 0], [0, 2], [0, 3], [4, 0]]


def f16_problem() -> BenchmarkProblem:
    system = ControlAffineSystem.linear(F16_A, F16_B, F16_H, name="f16")
    gain = pole_placement(F16_A, F16_B, F16_POLES)
    k0 = FeedbackPolicy.linear(-gain)
    k0.label = "pole_placement"
    sampling = SamplingConfig([-5.0] * 3, [5.0] * 3, num_ic=10, steps_per_trajectory=100, seed=0)
    cfg = KpiConfig(sampling=sampling, dt=0.15)
    cost = GameCost(quadratic_state_cost, 1.0, 5.0)
    dictionary = MonomialDictionary(F16_DICT)
    P = gare_solve(F16_A, F16_B, F16_H, np.eye(3), 1.0, 5.0)
    reference = {
        "coefficients": quadratic_coefficients(P, dictionary),
        "P": P,
        "published_P": F16_P_PUBLISHED,
        "published_coefficients": F16_V_PUBLISHED,
        "source": "GARE solution with Q = I, r = 1, gamma = 5",
    }
    return BenchmarkProblem("f16", system, cost, dictionary, k0, cfg, reference)


def _ex2_drift(x):
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([-x1 + x2, -0.5 * (x1 + x2) + 0.5 * x1**2 * x2], axis=-1)


def _ex2_g(x):
    return np.stack([np.zeros_like(x[..., 0]), x[..., 0]], axis=-1)


def _ex2_h(x):
    return np.stack([np.full_like(x[..., 0], 0.1), 0.5 * x[..., 1]], axis=-1)


def example2_problem(gamma: float = math.inf) -> BenchmarkProblem:
    if not gamma > 0:
        raise ValueError("gamma must be positive or inf")
    system = ControlAffineSystem(2, _ex2_drift, _ex2_g, _ex2_h, name="example2")
    sampling = SamplingConfig([-1.0] * 2, [1.0] * 2, num_ic=50, steps_per_trajectory=100, seed=0)
    cfg = KpiConfig(sampling=sampling, dt=0.01)
    cost = GameCost(quadratic_state_cost, 1.0, gamma)
    dictionary = MonomialDictionary(EX2_DICT)
    k0 = FeedbackPolicy.zero()
    if math.isinf(gamma):
        name = "example2_hjb"
        reference = {
            "coefficients": np.array([0.0, 0.5, 0.0, 1.0, 0.0, 0.0, 0.0]),
            "published_coefficients": EX2_V_PUBLISHED_HJB,
            "policies": {"u": "-x1*x2"},
            "source": "analytic HJB solution V = 0.5 x1^2 + x2^2",
        }
    else:
        name = "example2_hji"
        reference = {
            "coefficients": None,
            "published_coefficients": EX2_V_PUBLISHED_HJI if gamma == 5 else None,
            "source": "no analytic solution; published KPI coefficients for gamma = 5",
        }
    return BenchmarkProblem(name, system, cost, dictionary, k0, cfg, reference)


def _ex3_c(x1):
    return np.cos(2 * x1) + 2.0


def _ex3_s(x1):
    return np.sin(4 * x1) + 2.0


def example3_problem(gamma: float = 8.0, printed_initial_control: bool = False) -> BenchmarkProblem:
    """Nonlinear HJI benchmark with known value ``x1^4/4 + x2^2/2``.

    The default initial controller cancels the destabilizing drift terms. With
    ``printed_initial_control=True`` the opposite sign is used, which doubles
    them instead and leaves policy iteration on an indefinite value function.
    """
    def drift(x):
        x1, x2 = x[..., 0], x[..., 1]
        c, s = _ex3_c(x1), _ex3_s(x1)
        f2 = -x1**3 - x2**3 + x2 * c**2 / 4.0 - x2 * s**2 / (4.0 * gamma**2)
        return np.stack([-x1 + x2, f2], axis=-1)

    def g(x):
        return np.stack([np.zeros_like(x[..., 0]), _ex3_c(x[..., 0])], axis=-1)

    def h(x):
        # printed as sin(4 x1) + 4; the drift and the optimal adversary both use + 2
        return np.stack([np.zeros_like(x[..., 0]), _ex3_s(x[..., 0])], axis=-1)

    sign = 1.0 if printed_initial_control else -1.0

    def u_initial(x):
        x1, x2 = x[..., 0], x[..., 1]
        c, s = _ex3_c(x1), _ex3_s(x1)
        return sign * (x2 * c**2 / 4.0 - x2 * s**2 / (4.0 * gamma**2)) / c

    system = ControlAffineSystem(2, drift, g, h, name="example3")
    sampling = SamplingConfig([-1.25] * 2, [1.25] * 2, num_ic=100, steps_per_trajectory=40, seed=0)
    cfg = KpiConfig(sampling=sampling, dt=0.025)
    cost = GameCost(quartic_state_cost, 1.0, gamma)
    dictionary = MonomialDictionary(EX3_DICT)
    k0 = FeedbackPolicy.builtin("example3_initial", u_initial, gamma=gamma)
    reference = {
        "coefficients": np.array([0.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.25]),
        "published_coefficients": EX3_V_PUBLISHED,
        "policies": {"u": "-(cos(2 x1) + 2) x2 / 2", "w": "(sin(4 x1) + 2) x2 / (2 gamma^2)"},
        "source": "analytic HJI solution V = x1^4/4 + x2^2/2",
    }
    notes = [
        "initial controller sign flipped relative to the printed expression so that it is stabilizing",
        "adversary field uses sin(4 x1) + 2 to match the drift compensation term",
        "state cost q = x1^4 + x2^4 is the one for which V = x1^4/4 + x2^2/2 solves the HJI equation",
    ]
    return BenchmarkProblem("example3", system, cost, dictionary, k0, cfg, reference, notes)


BENCHMARKS: dict[str, Callable[[], BenchmarkProblem]] = {
    "f16": f16_problem,
    "example2_hjb": lambda: example2_problem(math.inf),
    "example2_hji": lambda: example2_problem(5.0),
    "example3": example3_problem,
}


def get_benchmark(name: str) -> BenchmarkProblem:
    try:
        return BENCHMARKS[name]()
    except KeyError:
        raise KeyError(f"unknown benchmark {name!r}; choose from {sorted(BENCHMARKS)}") from None


def reference_grid(problem: BenchmarkProblem, points: int = 21) -> np.ndarray:
    cfg = problem.default_config.sampling
    axes = [np.linspace(lo, hi, points) for lo, hi in zip(cfg.domain_lo, cfg.domain_hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def analytic_reference(problem: BenchmarkProblem, points: int = 21) -> Optional[dict]:
    """Reference coefficients and their HJB/HJI residual on a uniform grid over the box."""
    ref = problem.reference or {}
    coeffs = ref.get("coefficients")
    if coeffs is None:
        return None
    vf = ValueFunction(coeffs, problem.dictionary)
    residual = hji_residual(vf, problem.system, problem.cost, reference_grid(problem, points))
    return {"coefficients": np.asarray(coeffs, dtype=float), "residual": residual}
