"""Command line front end: ``koopgame run`` and ``koopgame validate``.

Config files are single JSON documents::

    {
      "benchmark": "f16",                  # or "custom": {...}, exactly one
      "overrides": {"mode": "data_driven", "dt": 0.1,
                    "sampling": {"seed": 3}},
      "output_dir": "out",
      "formats": ["json", "csv"]
    }

A custom problem looks like::

    "custom": {
      "name": "my_problem",
      "system": {"type": "linear", "A": [[...]], "B": [...], "H": [...]},
                # or {"type": "builtin", "name": "example2"}
      "dictionary": [[2, 0], [1, 1], [0, 2]],
      "cost": {"state_cost": "quadratic", "r": 1.0, "gamma": 5.0},
                # gamma null or "inf" for the HJB problem;
                # state_cost: "quadratic" | "quartic" | {"Q": [[...]]}
      "initial_control": {"type": "zero"},   # or {"type": "linear_gain", "gain": [...]}
      "config": {"dt": 0.05, "sampling": {"domain_lo": [-1, -1], "domain_hi": [1, 1],
                                          "num_ic": 20}}
    }
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .basis import MonomialDictionary
from .benchmarks import (BENCHMARKS, BenchmarkProblem, analytic_reference, example2_problem,
                         example3_problem, f16_problem, get_benchmark, quadratic_state_cost,
                         quartic_state_cost, reference_grid)
from .dynamics import ControlAffineSystem, FeedbackPolicy, SamplingConfig, closed_loop_field, sample_states, simulate
from .errors import ConfigError, KpiError, SolverFailure
from .koopman import RegressionSettings
from .kpi import GameCost, KpiConfig, KpiResult, ValueFunction, adversary_update, control_update, hji_residual, run_kpi

log = logging.getLogger(__name__)

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2

KPI_FIELDS = {
    "mode": str, "dt": float, "substeps": int, "collocation_points": int,
    "inner_tol": float, "outer_tol": float, "inner_max": int, "outer_max": int,
    "svd_cutoff": float, "min_samples_factor": float,
}
SAMPLING_FIELDS = {
    "domain_lo": list, "domain_hi": list, "num_ic": int, "steps_per_trajectory": int,
    "seed": int, "blowup_radius": float,
}
TOP_LEVEL = {"benchmark", "custom", "overrides", "output_dir", "formats"}
ROLLOUT_HORIZON = 10.0
ROLLOUT_COUNT = 10


@dataclass
class RunConfig:
    problem: BenchmarkProblem
    kpi: KpiConfig
    resolved: dict
    output_dir: Path
    formats: tuple


# ---------------------------------------------------------------- config parsing

def _check_type(value, kind, field):
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", field)
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", field)
        return value
    if kind is list:
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                                  for v in value):
            raise ConfigError(f"expected a list of numbers, got {value!r}", field)
        return [float(v) for v in value]
    if not isinstance(value, kind):
        raise ConfigError(f"expected {kind.__name__}, got {value!r}", field)
    return value


def _number_matrix(value, field, ndim):
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError("expected a numeric array", field) from None
    if arr.ndim != ndim or not np.all(np.isfinite(arr)):
        raise ConfigError(f"expected a finite {ndim}-d numeric array", field)
    return arr


def _gamma(value, field):
    if value is None or value == "inf":
        return math.inf
    return _check_type(value, float, field)


def kpi_config_to_dict(cfg: KpiConfig) -> dict:
    s = cfg.sampling
    return {
        "mode": cfg.mode,
        "dt": cfg.dt,
        "substeps": cfg.substeps,
        "collocation_points": cfg.collocation_points,
        "inner_tol": cfg.inner_tol,
        "outer_tol": cfg.outer_tol,
        "inner_max": cfg.inner_max,
        "outer_max": cfg.outer_max,
        "svd_cutoff": cfg.regression.svd_cutoff,
        "min_samples_factor": cfg.regression.min_samples_factor,
        "sampling": {
            "domain_lo": [float(v) for v in s.domain_lo],
            "domain_hi": [float(v) for v in s.domain_hi],
            "num_ic": s.num_ic,
            "steps_per_trajectory": s.steps_per_trajectory,
            "seed": s.seed,
            "blowup_radius": float(s.blowup_radius),
        },
    }


def apply_overrides(base: KpiConfig, overrides: dict, prefix: str = "overrides") -> KpiConfig:
    if not isinstance(overrides, dict):
        raise ConfigError("expected an object", prefix)
    merged = kpi_config_to_dict(base) if base.sampling is not None else {"sampling": {}}
    for key, value in overrides.items():
        field = f"{prefix}.{key}"
        if key == "sampling":
            if not isinstance(value, dict):
                raise ConfigError("expected an object", field)
            for skey, svalue in value.items():
                if skey not in SAMPLING_FIELDS:
                    raise ConfigError("unknown sampling field", f"{field}.{skey}")
                merged["sampling"][skey] = _check_type(svalue, SAMPLING_FIELDS[skey], f"{field}.{skey}")
        elif key in KPI_FIELDS:
            merged[key] = _check_type(value, KPI_FIELDS[key], field)
        else:
            raise ConfigError("unknown setting", field)
    return _build_kpi_config(merged, prefix)


def _build_kpi_config(d: dict, prefix: str) -> KpiConfig:
    try:
        sampling = SamplingConfig(**d["sampling"])
        sampling.validate_box()
    except TypeError as exc:
        raise ConfigError(f"incomplete sampling section ({exc})", f"{prefix}.sampling") from None
    except ValueError as exc:
        raise ConfigError(str(exc), f"{prefix}.sampling") from None
    try:
        regression = RegressionSettings(d.get("svd_cutoff", 1e-10), d.get("min_samples_factor", 2.0))
        kw = {k: d[k] for k in KPI_FIELDS if k in d and k not in ("svd_cutoff", "min_samples_factor")}
        return KpiConfig(sampling=sampling, regression=regression, **kw)
    except ValueError as exc:
        raise ConfigError(str(exc), prefix) from None


def _state_cost(spec, field):
    if spec == "quadratic":
        return quadratic_state_cost
    if spec == "quartic":
        return quartic_state_cost
    if isinstance(spec, dict) and "Q" in spec:
        Q = _number_matrix(spec["Q"], f"{field}.Q", 2)
        if np.min(np.linalg.eigvalsh(0.5 * (Q + Q.T))) < -1e-12:
            raise ConfigError("Q must be positive semidefinite", f"{field}.Q")

        def cost(x):
            x = np.asarray(x, dtype=float)
            return np.einsum("...i,ij,...j->...", x, Q, x)

        return cost
    raise ConfigError("expected 'quadratic', 'quartic' or {\"Q\": matrix}", field)


def _custom_problem(spec: dict) -> BenchmarkProblem:
    p = "custom"
    if not isinstance(spec, dict):
        raise ConfigError("expected an object", p)
    for key in ("system", "dictionary", "cost", "config"):
        if key not in spec:
            raise ConfigError("missing required field", f"{p}.{key}")

    cost_spec = spec["cost"]
    if not isinstance(cost_spec, dict):
        raise ConfigError("expected an object", f"{p}.cost")
    r = _check_type(cost_spec.get("r", 1.0), float, f"{p}.cost.r")
    gamma = _gamma(cost_spec.get("gamma"), f"{p}.cost.gamma")
    try:
        cost = GameCost(_state_cost(cost_spec.get("state_cost", "quadratic"), f"{p}.cost.state_cost"), r, gamma)
    except ValueError as exc:
        raise ConfigError(str(exc), f"{p}.cost") from None

    sys_spec = spec["system"]
    if not isinstance(sys_spec, dict):
        raise ConfigError("expected an object", f"{p}.system")
    kind = sys_spec.get("type")
    try:
        if kind == "linear":
            A = _number_matrix(sys_spec.get("A"), f"{p}.system.A", 2)
            B = _number_matrix(sys_spec.get("B"), f"{p}.system.B", 1)
            H = _number_matrix(sys_spec.get("H", [0.0] * len(A)), f"{p}.system.H", 1)
            if A.shape[0] != A.shape[1] or B.shape != (len(A),) or H.shape != (len(A),):
                raise ConfigError("inconsistent matrix shapes", f"{p}.system")
            system = ControlAffineSystem.linear(A, B, H, name=spec.get("name", "custom"))
        elif kind == "builtin":
            builtin = sys_spec.get("name")
            if builtin == "f16":
                system = f16_problem().system
            elif builtin == "example2":
                system = example2_problem().system
            elif builtin == "example3":
                system = example3_problem(gamma if not math.isinf(gamma) else 8.0).system
            else:
                raise ConfigError("unknown builtin system (f16, example2, example3)", f"{p}.system.name")
        else:
            raise ConfigError("type must be 'linear' or 'builtin'", f"{p}.system.type")
    except ValueError as exc:
        raise ConfigError(str(exc), f"{p}.system") from None

    try:
        dictionary = MonomialDictionary(spec["dictionary"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), f"{p}.dictionary") from None
    if dictionary.dim != system.dim:
        raise ConfigError(f"exponent vectors must have length {system.dim}", f"{p}.dictionary")

    ic = spec.get("initial_control", {"type": "zero"})
    if not isinstance(ic, dict):
        raise ConfigError("expected an object", f"{p}.initial_control")
    if ic.get("type") == "zero":
        k0 = FeedbackPolicy.zero()
    elif ic.get("type") == "linear_gain":
        gain = _number_matrix(ic.get("gain"), f"{p}.initial_control.gain", 1)
        if gain.shape != (system.dim,):
            raise ConfigError(f"gain must have length {system.dim}", f"{p}.initial_control.gain")
        k0 = FeedbackPolicy.linear(gain)
    else:
        raise ConfigError("type must be 'zero' or 'linear_gain'", f"{p}.initial_control.type")

    cfg = apply_overrides(KpiConfig(), spec["config"], f"{p}.config")
    if cfg.sampling.dim != system.dim:
        raise ConfigError(f"domain bounds must have length {system.dim}", f"{p}.config.sampling")
    try:
        cost.check(sample_states(cfg.sampling, 256), system.dim)
    except ValueError as exc:
        raise ConfigError(str(exc), f"{p}.cost.state_cost") from None
    return BenchmarkProblem(spec.get("name", "custom"), system, cost, dictionary, k0, cfg, None)


def parse_config(raw: dict, output_dir: Optional[str] = None, mode: Optional[str] = None,
                 seed: Optional[int] = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a JSON object")
    unknown = set(raw) - TOP_LEVEL
    if unknown:
        raise ConfigError("unknown top-level field", sorted(unknown)[0])
    if ("benchmark" in raw) == ("custom" in raw):
        raise ConfigError("exactly one of 'benchmark' or 'custom' is required")
    if "benchmark" in raw:
        name = raw["benchmark"]
        if name not in BENCHMARKS:
            raise ConfigError(f"unknown benchmark {name!r}; choose from {sorted(BENCHMARKS)}", "benchmark")
        problem = get_benchmark(name)
    else:
        problem = _custom_problem(raw["custom"])
    overrides = dict(raw.get("overrides", {}))
    if mode is not None:
        overrides["mode"] = mode
    if seed is not None:
        overrides["sampling"] = dict(overrides.get("sampling", {}), seed=seed)
    cfg = apply_overrides(problem.default_config, overrides)
    formats = raw.get("formats", ["json", "csv"])
    if not isinstance(formats, list) or not set(formats) <= {"json", "csv"}:
        raise ConfigError("must be a subset of ['json', 'csv']", "formats")
    out = output_dir or raw.get("output_dir") or "kpi_out"
    if not isinstance(out, str):
        raise ConfigError("expected a path string", "output_dir")
    resolved = {k: raw[k] for k in ("benchmark", "custom") if k in raw}
    resolved["overrides"] = kpi_config_to_dict(cfg)
    resolved["output_dir"] = out
    resolved["formats"] = list(formats)
    return RunConfig(problem, cfg, resolved, Path(out), tuple(formats))


def load_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None


# ---------------------------------------------------------------- outputs

def _fmt(x: float) -> str:
    return repr(float(x))


def write_trace_csv(path: Path, result: KpiResult, timing: bool = True):
    n = len(result.final_value.coefficients)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["outer_i", "inner_j"] + [f"v_{i}" for i in range(1, n + 1)] + ["residual", "delta", "wall_ms"])
        for rec in result.trace:
            wall = _fmt(rec.wall_time * 1e3) if timing else "0.0"
            w.writerow([rec.outer, rec.inner] + [_fmt(c) for c in rec.coefficients]
                       + [_fmt(rec.residual), _fmt(rec.delta), wall])


def rollouts(problem: BenchmarkProblem, cfg: KpiConfig, result: KpiResult,
             horizon: float = ROLLOUT_HORIZON, count: int = ROLLOUT_COUNT):
    """Closed-loop trajectories under the initial, final and (if known) reference policies."""
    sys_ = problem.system
    zero = FeedbackPolicy.zero()
    policies = [("initial", problem.initial_control, zero), ("final", result.control, result.adversary)]
    ref = (problem.reference or {}).get("coefficients")
    if ref is not None:
        vf = ValueFunction(ref, problem.dictionary)
        adv = zero if problem.cost.hjb else adversary_update(vf, sys_, problem.cost.gamma)
        policies.append(("reference", control_update(vf, sys_, problem.cost.control_weight), adv))
    x0s = sample_states(cfg.sampling, count)
    steps = int(round(horizon / cfg.dt))
    out = []
    for label, k, l in policies:
        fc = closed_loop_field(sys_, k, l)
        traj = simulate(fc, x0s, cfg.dt, steps, cfg.substeps)
        ts = cfg.dt * np.arange(steps + 1)
        for tid in range(len(x0s)):
            xs = traj[:, tid]
            out.append((label, tid, ts, xs, k(xs), l(xs)))
    return out


def write_trajectories_csv(path: Path, trajectories, dim: int):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy_label", "traj_id", "t"] + [f"x_{i}" for i in range(1, dim + 1)] + ["u", "w"])
        for label, tid, ts, xs, us, ws in trajectories:
            for t, x, u, wv in zip(ts, xs, us, ws):
                w.writerow([label, tid, _fmt(t)] + [_fmt(v) for v in x] + [_fmt(u), _fmt(wv)])


def build_report(rc: RunConfig, result: KpiResult) -> dict:
    problem = rc.problem
    grid = reference_grid(problem, 21)
    report = {
        "version": __version__,
        "problem": problem.name,
        "config": rc.resolved,
        "dictionary": {"exponents": problem.dictionary.exponents.tolist(), "labels": problem.dictionary.labels()},
        "converged": result.converged,
        "termination_reason": result.termination_reason,
        "outer_iterations": result.outer_iterations,
        "evaluations": len(result.trace),
        "final_coefficients": result.final_value.coefficients.tolist(),
        "final_residual": result.trace[-1].residual if result.trace else None,
        "hji_residual_grid": hji_residual(result.final_value, problem.system, problem.cost, grid),
        "wall_time_s": result.wall_time,
        "trace": [
            {"outer_i": r.outer, "inner_j": r.inner, "coefficients": r.coefficients.tolist(),
             "residual": r.residual, "delta": r.delta, "wall_ms": r.wall_time * 1e3}
            for r in result.trace
        ],
        "notes": list(problem.notes),
    }
    ref = problem.reference or {}
    if ref.get("coefficients") is not None:
        refc = np.asarray(ref["coefficients"], dtype=float)
        report["reference"] = {
            "source": ref.get("source"),
            "coefficients": refc.tolist(),
            "deviation": (result.final_value.coefficients - refc).tolist(),
            "max_abs_deviation": float(np.max(np.abs(result.final_value.coefficients - refc))),
            "hji_residual_grid": analytic_reference(problem)["residual"],
        }
    if ref.get("published_coefficients") is not None:
        report["published_coefficients"] = np.asarray(ref["published_coefficients"]).tolist()
    return report


def print_summary(rc: RunConfig, result: KpiResult, report: dict, stream=None):
    stream = stream or sys.stdout
    p = rc.problem
    print(f"problem      {p.name}  (mode={rc.kpi.mode})", file=stream)
    status = "converged" if result.converged else result.termination_reason
    print(f"status       {status} after {result.outer_iterations} outer / {len(result.trace)} evaluations",
          file=stream)
    print(f"residual     ||Lv-b|| = {report['final_residual']:.3e}   HJI grid RMS = "
          f"{report['hji_residual_grid']:.3e}", file=stream)
    print(f"wall time    {report['wall_time_s']:.3f} s", file=stream)
    ref = report.get("reference")
    header = f"{'term':>12} {'v':>12}"
    if ref:
        header += f" {'reference':>12} {'deviation':>12}"
    print(header, file=stream)
    for i, label in enumerate(p.dictionary.labels()):
        line = f"{label:>12} {result.final_value.coefficients[i]:12.6f}"
        if ref:
            line += f" {ref['coefficients'][i]:12.6f} {ref['deviation'][i]:12.2e}"
        print(line, file=stream)


def execute(rc: RunConfig, dump_trajectories: bool = False, timing: bool = True) -> int:
    p = rc.problem
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            result = run_kpi(p.system, p.cost, p.dictionary, p.initial_control, rc.kpi)
        except SolverFailure as exc:
            print(f"error: {exc}", file=sys.stderr)
            if exc.result is not None and exc.result.trace:
                rc.output_dir.mkdir(parents=True, exist_ok=True)
                if "csv" in rc.formats:
                    write_trace_csv(rc.output_dir / "trace.csv", exc.result, timing)
            return EXIT_ERROR
    report = build_report(rc, result)
    if not timing:
        report["wall_time_s"] = 0.0
        for entry in report["trace"]:
            entry["wall_ms"] = 0.0
    rc.output_dir.mkdir(parents=True, exist_ok=True)
    if "json" in rc.formats:
        (rc.output_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    if "csv" in rc.formats:
        write_trace_csv(rc.output_dir / "trace.csv", result, timing)
    if dump_trajectories:
        write_trajectories_csv(rc.output_dir / "trajectories.csv", rollouts(p, rc.kpi, result), p.system.dim)
    print_summary(rc, result, report)
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


# ---------------------------------------------------------------- entry point

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="koopgame", description="Koopman policy iteration for zero-sum games")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="solve a benchmark or configured problem")
    src = run.add_mutually_exclusive_group(required=True)
    src.add_argument("--benchmark", choices=sorted(BENCHMARKS))
    src.add_argument("--config", help="JSON run configuration")
    run.add_argument("--mode", choices=["model_based", "data_driven"])
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="output directory (default: config output_dir or ./kpi_out)")
    run.add_argument("--dump-trajectories", action="store_true",
                     help="write closed-loop rollouts to trajectories.csv")
    run.add_argument("--no-timing", action="store_true",
                     help="write zero wall times so outputs are byte-reproducible")

    val = sub.add_parser("validate", help="check a configuration without running it")
    val.add_argument("--config", required=True)
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "validate":
            parse_config(load_config_file(args.config))
            print("config OK")
            return EXIT_OK
        raw = {"benchmark": args.benchmark} if args.benchmark else load_config_file(args.config)
        if args.seed is not None and args.seed < 0:
            raise ConfigError("seed must be non-negative", "--seed")
        rc = parse_config(raw, output_dir=args.out, mode=args.mode, seed=args.seed)
        return execute(rc, dump_trajectories=args.dump_trajectories, timing=not args.no_timing)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except KpiError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
