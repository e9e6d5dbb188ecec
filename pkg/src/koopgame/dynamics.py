"""Control-affine systems, feedback policies, RK4 integration and snapshot data.

Vector fields and policies are vectorized: they take a state array of shape
``(..., n)`` and return ``(..., n)`` (fields) or ``(...)`` (policies).
Implementations must be elementwise in the leading axes so that batched and
single-state evaluation agree bit-for-bit.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InsufficientData, NonFiniteState

Field = Callable[[np.ndarray], np.ndarray]

# Fixed IC chunk size for snapshot generation. Chunks are the unit of work for
# the thread pool, so results never depend on the worker count.
SNAPSHOT_CHUNK = 16


def linear_field(matrix) -> Field:
    """Return ``x -> matrix @ x`` evaluated without BLAS (batch-size independent)."""
    M = np.array(matrix, dtype=float)
    if M.ndim == 1:
        M = M[:, None]

    def fn(x):
        x = np.asarray(x, dtype=float)
        out = x[..., None, 0] * M[:, 0]
        for j in range(1, M.shape[1]):
            out = out + x[..., None, j] * M[:, j]
        return out

    return fn


def constant_field(vector) -> Field:
    """Return the state-independent field ``x -> vector``."""
    v = np.array(vector, dtype=float).ravel()

    def fn(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(v, x.shape[:-1] + v.shape)

    return fn


def zero_field(x):
    x = np.asarray(x, dtype=float)
    return np.zeros_like(x)


@dataclass
class ControlAffineSystem:
    """``xdot = f(x) + g(x) u + h(x) w`` with scalar control ``u`` and adversary ``w``."""

    dim: int
    drift: Field
    control_field: Field
    adversary_field: Field
    name: str = ""

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError("dim must be a positive integer")
        self.dim = int(self.dim)
        probe = np.zeros(self.dim)
        for label, fn in (("drift", self.drift), ("control_field", self.control_field),
                          ("adversary_field", self.adversary_field)):
            out = np.asarray(fn(probe))
            if out.shape != (self.dim,):
                raise ValueError(f"{label} returned shape {out.shape}, expected ({self.dim},)")
        if np.any(np.asarray(self.drift(probe)) != 0.0):
            raise ValueError("drift(0) must be 0: the origin has to be an equilibrium")

    @classmethod
    def linear(cls, A, B, H, name: str = "") -> "ControlAffineSystem":
        A = np.array(A, dtype=float)
        return cls(A.shape[0], linear_field(A), constant_field(B), constant_field(H), name)


@dataclass(eq=False)
class FeedbackPolicy:
    """State feedback ``x -> scalar``.

    ``kind`` is one of ``zero``, ``linear_gain``, ``value_gradient`` or
    ``builtin_expression``; build instances through the classmethods.
    """

    kind: str
    gain: Optional[np.ndarray] = None
    coefficients: Optional[np.ndarray] = None
    dictionary: object = None
    field: Optional[Field] = None
    scale: float = 0.0
    expression: Optional[Callable[[np.ndarray], np.ndarray]] = None
    label: str = ""
    meta: dict = dc_field(default_factory=dict)

    @classmethod
    def zero(cls) -> "FeedbackPolicy":
        return cls("zero", label="zero")

    @classmethod
    def linear(cls, gain) -> "FeedbackPolicy":
        """Policy ``x -> gain . x``."""
        return cls("linear_gain", gain=np.array(gain, dtype=float).ravel(), label="linear_gain")

    @classmethod
    def value_gradient(cls, dictionary, coefficients, field: Field, scale: float,
                       label: str = "value_gradient") -> "FeedbackPolicy":
        """Policy ``x -> scale * field(x) . grad(v^T Psi)(x)``."""
        v = np.array(coefficients, dtype=float).ravel()
        return cls("value_gradient", coefficients=v, dictionary=dictionary, field=field,
                   scale=float(scale), label=label)

    @classmethod
    def builtin(cls, label: str, fn: Callable[[np.ndarray], np.ndarray], **meta) -> "FeedbackPolicy":
        return cls("builtin_expression", expression=fn, label=label, meta=dict(meta))

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "zero":
            return np.zeros(x.shape[:-1])
        if self.kind == "linear_gain":
            out = x[..., 0] * self.gain[0]
            for j in range(1, len(self.gain)):
                out = out + x[..., j] * self.gain[j]
            return out
        if self.kind == "value_gradient":
            if not np.any(self.coefficients):
                return np.zeros(x.shape[:-1])
            grad_v = self.dictionary.gradient_combination(self.coefficients, x)
            fx = np.asarray(self.field(x), dtype=float)
            out = fx[..., 0] * grad_v[..., 0]
            for j in range(1, fx.shape[-1]):
                out = out + fx[..., j] * grad_v[..., j]
            return self.scale * out
        if self.kind == "builtin_expression":
            return np.asarray(self.expression(x), dtype=float)
        raise ValueError(f"unknown policy kind {self.kind!r}")


def closed_loop_field(sys: ControlAffineSystem, k: FeedbackPolicy, l: FeedbackPolicy) -> Field:
    """Return ``x -> f(x) + g(x) k(x) + h(x) l(x)``."""

    def fn(x):
        x = np.asarray(x, dtype=float)
        out = sys.drift(x) + sys.control_field(x) * k(x)[..., None]
        if l.kind != "zero":
            out = out + sys.adversary_field(x) * l(x)[..., None]
        return out

    return fn


def rk4_step(field: Field, x: np.ndarray, h: float) -> np.ndarray:
    k1 = field(x)
    k2 = field(x + 0.5 * h * k1)
    k3 = field(x + 0.5 * h * k2)
    k4 = field(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_rk4(field: Field, x0, dt: float, substeps: int = 10) -> np.ndarray:
    """Advance ``x0`` by ``dt`` using ``substeps`` classical RK4 steps.

    Works on a single state or a batch. Raises NonFiniteState as soon as any
    intermediate state is not finite.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if int(substeps) != substeps or substeps < 1:
        raise ValueError("substeps must be a positive integer")
    x = np.array(x0, dtype=float)
    h = dt / substeps
    for _ in range(int(substeps)):
        with np.errstate(over="ignore", invalid="ignore"):
            x = rk4_step(field, x, h)
        if not np.all(np.isfinite(x)):
            raise NonFiniteState(f"non-finite state after RK4 step (h={h})")
    return x


@dataclass
class SamplingConfig:
    domain_lo: Sequence[float]
    domain_hi: Sequence[float]
    num_ic: int
    steps_per_trajectory: int = 100
    seed: int = 0
    blowup_radius: Optional[float] = None

    def __post_init__(self):
        self.domain_lo = np.array(self.domain_lo, dtype=float).ravel()
        self.domain_hi = np.array(self.domain_hi, dtype=float).ravel()
        if self.domain_lo.shape != self.domain_hi.shape:
            raise ValueError("domain_lo and domain_hi must have the same length")
        if self.num_ic < 1:
            raise ValueError("num_ic must be >= 1")
        if self.steps_per_trajectory < 1:
            raise ValueError("steps_per_trajectory must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")
        if self.blowup_radius is None:
            half_width = float(np.max(self.domain_hi - self.domain_lo)) / 2.0
            self.blowup_radius = 1e3 * half_width if half_width > 0 else math.inf
        if not self.blowup_radius > 0:
            raise ValueError("blowup_radius must be positive")

    @property
    def dim(self) -> int:
        return len(self.domain_lo)

    def validate_box(self):
        """Strict ``lo < hi`` check; degenerate boxes are otherwise allowed for testing."""
        if np.any(self.domain_lo >= self.domain_hi):
            raise ValueError("domain_lo must be < domain_hi componentwise")

    def replace(self, **changes) -> "SamplingConfig":
        kw = dict(domain_lo=self.domain_lo, domain_hi=self.domain_hi, num_ic=self.num_ic,
                  steps_per_trajectory=self.steps_per_trajectory, seed=self.seed,
                  blowup_radius=self.blowup_radius)
        kw.update(changes)
        return SamplingConfig(**kw)


def make_rng(seed: int) -> np.random.Generator:
    """The package's one RNG: PCG64 seeded with ``seed`` (portable across platforms)."""
    return np.random.Generator(np.random.PCG64(seed))


def sample_states(cfg: SamplingConfig, count: Optional[int] = None) -> np.ndarray:
    """Draw ``count`` (default ``cfg.num_ic``) states i.i.d. uniform on the box."""
    n = cfg.num_ic if count is None else int(count)
    u = make_rng(cfg.seed).random((n, cfg.dim))
    return cfg.domain_lo + u * (cfg.domain_hi - cfg.domain_lo)


@dataclass
class SnapshotData:
    x_points: np.ndarray
    y_points: np.ndarray
    dt: float
    discarded: int = 0

    def __post_init__(self):
        self.x_points = np.atleast_2d(np.asarray(self.x_points, dtype=float))
        self.y_points = np.atleast_2d(np.asarray(self.y_points, dtype=float))
        if self.x_points.shape != self.y_points.shape:
            raise ValueError("x_points and y_points must have equal shape")
        if len(self.x_points) < 1:
            raise ValueError("snapshot data must contain at least one pair")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    def __len__(self) -> int:
        return len(self.x_points)


def _trajectory_chunk(field: Field, x0: np.ndarray, steps: int, dt: float,
                      substeps: int, radius: float):
    xs = np.empty((steps,) + x0.shape)
    ys = np.empty((steps,) + x0.shape)
    keep = np.zeros((steps, x0.shape[0]), dtype=bool)
    alive = np.ones(x0.shape[0], dtype=bool)
    x = x0.copy()
    h = dt / substeps
    for s in range(steps):
        y = x.copy()
        if np.any(alive):
            # only advance live trajectories; dead ones are frozen so they cannot overflow
            ya = y[alive]
            with np.errstate(over="ignore", invalid="ignore"):
                for _ in range(substeps):
                    ya = rk4_step(field, ya, h)
            y[alive] = ya
        norms = np.sqrt(np.sum(y * y, axis=-1))
        ok = alive & np.isfinite(norms) & (norms <= radius)
        xs[s], ys[s], keep[s] = x, y, ok
        alive = ok
        x = np.where(alive[:, None], y, x)
    # reorder to (IC, step)
    return xs.transpose(1, 0, 2), ys.transpose(1, 0, 2), keep.T


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("KPI_THREADS", "1")))
    except ValueError:
        return 1


def generate_snapshots(field: Field, cfg: SamplingConfig, dt: float, substeps: int = 10,
                       min_pairs: int = 1, threads: Optional[int] = None) -> SnapshotData:
    """Integrate trajectories from uniformly sampled ICs and collect consecutive pairs.

    Pairs are ordered by (IC index, step index). A trajectory whose state leaves
    the ``blowup_radius`` ball is stopped and its remaining pairs are discarded.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    x0 = sample_states(cfg)
    steps = cfg.steps_per_trajectory
    chunks = [x0[i:i + SNAPSHOT_CHUNK] for i in range(0, len(x0), SNAPSHOT_CHUNK)]
    work = lambda c: _trajectory_chunk(field, c, steps, dt, substeps, cfg.blowup_radius)  # noqa: E731
    threads = _default_threads() if threads is None else max(1, int(threads))
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    xs = np.concatenate([p[0] for p in parts]).reshape(-1, cfg.dim)
    ys = np.concatenate([p[1] for p in parts]).reshape(-1, cfg.dim)
    keep = np.concatenate([p[2] for p in parts]).ravel()
    total = keep.size
    kept = int(keep.sum())
    if total - kept > 0.5 * total:
        raise InsufficientData(f"{total - kept} of {total} snapshot pairs discarded by the divergence guard")
    if kept < max(1, min_pairs):
        raise InsufficientData(f"only {kept} snapshot pairs retained, need {min_pairs}")
    data = SnapshotData(xs[keep], ys[keep], dt, discarded=total - kept)
    _spot_check(field, data, substeps)
    return data


def _spot_check(field: Field, data: SnapshotData, substeps: int):
    idx = sorted({0, len(data) // 2, len(data) - 1})
    y = integrate_rk4(field, data.x_points[idx], data.dt, substeps)
    scale = 1.0 + np.abs(data.y_points[idx])
    if np.any(np.abs(y - data.y_points[idx]) > 1e-12 * scale):
        raise AssertionError("snapshot spot check failed: y is not the dt-flow of x")


def simulate(field: Field, x0, dt: float, steps: int, substeps: int = 10) -> np.ndarray:
    """States at ``0, dt, ..., steps*dt``; shape ``(steps + 1,) + x0.shape``.

    ``x0`` may be a batch. A trajectory that stops being finite is filled with
    NaN from that point on instead of aborting the others.
    """
    x = np.array(x0, dtype=float)
    batch = x.reshape(-1, x.shape[-1])
    out = np.full((int(steps) + 1,) + batch.shape, np.nan)
    out[0] = batch
    alive = np.all(np.isfinite(batch), axis=-1)
    h = dt / substeps
    cur = batch.copy()
    for s in range(1, int(steps) + 1):
        if not np.any(alive):
            break
        xa = cur[alive]
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(int(substeps)):
                xa = rk4_step(field, xa, h)
        cur[alive] = xa
        alive &= np.all(np.isfinite(cur), axis=-1)
        out[s][alive] = cur[alive]
    return out.reshape((int(steps) + 1,) + x.shape)
