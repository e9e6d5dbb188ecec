import dataclasses
import math

import numpy as np
import pytest

from koopgame.basis import MonomialDictionary
from koopgame.benchmarks import F16_V_PUBLISHED, example2_problem, quadratic_state_cost
from koopgame.dynamics import ControlAffineSystem, FeedbackPolicy, SamplingConfig, zero_field
from koopgame.errors import NonFiniteValue, SolverFailure
from koopgame.kpi import (GameCost, KpiConfig, ValueFunction, adversary_update, build_rhs, control_update,
                          hji_residual, policy_evaluation, run_kpi)


def solve(problem, **changes):
    cfg = dataclasses.replace(problem.default_config, **changes)
    return run_kpi(problem.system, problem.cost, problem.dictionary, problem.initial_control, cfg)


def test_game_cost_validation():
    with pytest.raises(ValueError):
        GameCost(quadratic_state_cost, control_weight=0.0)
    with pytest.raises(ValueError):
        GameCost(quadratic_state_cost, gamma=-1.0)
    assert GameCost(quadratic_state_cost).hjb


def test_build_rhs_hjb_example():
    cost = GameCost(quadratic_state_cost, control_weight=1.5)
    b = build_rhs(cost, FeedbackPolicy.linear([1.0, 1.0]), FeedbackPolicy.zero(), [[1.0, 1.0]])
    np.testing.assert_allclose(b, [-8.0])


def test_build_rhs_hji_example():
    cost = GameCost(quadratic_state_cost, 1.0, 2.0)
    b = build_rhs(cost, FeedbackPolicy.zero(), FeedbackPolicy.linear([1.0, 0.0]), [[1.0, 0.0]])
    np.testing.assert_allclose(b, [3.0])


def test_build_rhs_non_finite():
    cost = GameCost(quadratic_state_cost)
    with pytest.raises(NonFiniteValue):
        build_rhs(cost, FeedbackPolicy.linear([np.inf, 0.0]), FeedbackPolicy.zero(), [[1.0, 0.0]])


def test_policy_evaluation_examples():
    v, res = policy_evaluation(-np.eye(2), [1.0, 2.0])
    np.testing.assert_allclose(v, [-1.0, -2.0])
    assert res == 0.0
    v, _ = policy_evaluation([[-2.0]], [-1.0])
    assert v[0] == pytest.approx(0.5)


def test_policy_evaluation_solver_failure():
    with pytest.raises(SolverFailure):
        policy_evaluation(np.zeros((2, 2)), [1.0, 0.0])


def test_policy_evaluation_shape_check():
    with pytest.raises(ValueError):
        policy_evaluation(np.eye(3), [1.0, 2.0])


def test_control_update_example2(ex2_hjb, rng):
    vf = ValueFunction([0, 0.5, 0, 1, 0, 0, 0], ex2_hjb.dictionary)
    k = control_update(vf, ex2_hjb.system, 1.0)
    X = rng.uniform(-1, 1, size=(20, 2))
    np.testing.assert_allclose(k(X), -X[:, 0] * X[:, 1], atol=1e-14)


def test_control_update_example3(ex3, rng):
    vf = ValueFunction(ex3.reference["coefficients"], ex3.dictionary)
    X = rng.uniform(-1.25, 1.25, size=(20, 2))
    k = control_update(vf, ex3.system, 1.0)
    np.testing.assert_allclose(k(X), -0.5 * (np.cos(2 * X[:, 0]) + 2) * X[:, 1], atol=1e-14)
    l = adversary_update(vf, ex3.system, 8.0)
    np.testing.assert_allclose(l(X), (np.sin(4 * X[:, 0]) + 2) * X[:, 1] / 128.0, atol=1e-14)


def test_adversary_update_scaling(ex2_hji, rng):
    vf = ValueFunction([0, 0.5, 0, 1, 0, 0, 0], ex2_hji.dictionary)
    X = rng.uniform(-1, 1, size=(10, 2))
    l5 = adversary_update(vf, ex2_hji.system, 5.0)(X)
    l10 = adversary_update(vf, ex2_hji.system, 10.0)(X)
    np.testing.assert_allclose(l10, l5 / 4.0, rtol=1e-12)
    # h = (0.1, x2/2), grad V = (x1, 2 x2)
    np.testing.assert_allclose(l5, (0.1 * X[:, 0] + X[:, 1] ** 2) / 50.0, atol=1e-14)
    with pytest.raises(ValueError):
        adversary_update(vf, ex2_hji.system, math.inf)


def test_hji_residual_scalar_lq():
    # xdot = x + u, q = x^2, r = 1: V = (1 + sqrt 2) x^2
    sys_ = ControlAffineSystem.linear([[1.0]], [1.0], [0.0])
    d = MonomialDictionary([[2]])
    cost = GameCost(quadratic_state_cost)
    X = np.linspace(-1, 1, 11)[:, None]
    assert hji_residual(ValueFunction([1 + math.sqrt(2)], d), sys_, cost, X) < 1e-12
    # V = x^2: residual q + 2 x^2 - x^2 = 2 x^2
    expected = math.sqrt(np.mean((2 * X[:, 0] ** 2) ** 2))
    assert hji_residual(ValueFunction([1.0], d), sys_, cost, X) == pytest.approx(expected)


def test_hji_residual_with_adversary():
    # xdot = -x + u + w, q = x^2, r = 1, gamma = 2, V = p x^2: 1 - 2p - p^2 + p^2/4 = 0
    sys_ = ControlAffineSystem.linear([[-1.0]], [1.0], [1.0])
    d = MonomialDictionary([[2]])
    p = (-2 + math.sqrt(4 + 3)) / 1.5
    X = np.linspace(-1, 1, 11)[:, None]
    assert hji_residual(ValueFunction([p], d), sys_, GameCost(quadratic_state_cost, 1.0, 2.0), X) < 1e-12


def test_value_function_checks():
    d = MonomialDictionary([[2]])
    with pytest.raises(ValueError):
        ValueFunction([1.0, 2.0], d)
    with pytest.raises(ValueError):
        ValueFunction([np.nan], d)


def test_trace_invariants(f16):
    result = solve(f16)
    trace = result.trace
    assert trace[0].outer == 0 and trace[0].inner == 0
    assert trace[0].delta == pytest.approx(np.max(np.abs(trace[0].coefficients)))
    for prev, rec in zip(trace, trace[1:]):
        assert rec.outer in (prev.outer, prev.outer + 1)
        assert rec.inner == (prev.inner + 1 if rec.outer == prev.outer else 0)
        assert rec.delta == pytest.approx(np.max(np.abs(rec.coefficients - prev.coefficients)))
        assert rec.wall_time >= 0
    assert result.converged and result.termination_reason == "converged"
    np.testing.assert_array_equal(result.final_value.coefficients, trace[-1].coefficients)


def test_hjb_single_inner_pass(ex2_hjb):
    result = solve(ex2_hjb)
    assert all(rec.inner == 0 for rec in result.trace)
    assert result.adversary.kind == "zero"


def test_deterministic(ex2_hji):
    a = solve(ex2_hji)
    b = solve(ex2_hji)
    assert len(a.trace) == len(b.trace)
    for ra, rb in zip(a.trace, b.trace):
        np.testing.assert_array_equal(ra.coefficients, rb.coefficients)
        assert ra.residual == rb.residual


def test_converged_policies_consistent(ex3):
    result = solve(ex3)
    vf = result.final_value
    X = np.random.default_rng(0).uniform(-1, 1, size=(30, 2))
    np.testing.assert_allclose(result.control(X), control_update(vf, ex3.system, 1.0)(X))
    np.testing.assert_allclose(result.adversary(X), adversary_update(vf, ex3.system, 8.0)(X))
    assert hji_residual(vf, ex3.system, ex3.cost, X) < 1e-6


def test_outer_cap_reports_not_converged(f16):
    result = solve(f16, outer_max=1)
    assert not result.converged and result.termination_reason == "max_iterations"
    assert result.outer_iterations == 1


def test_hjb_is_limit_of_hji():
    hjb = solve(example2_problem(math.inf)).final_value.coefficients
    hji = solve(example2_problem(1e6)).final_value.coefficients
    assert np.max(np.abs(hjb - hji)) <= 1e-3


def test_solver_failure_carries_partial_result():
    sys_ = ControlAffineSystem(2, zero_field, lambda x: np.zeros_like(x), lambda x: np.zeros_like(x))
    cfg = KpiConfig(sampling=SamplingConfig([-1.0, -1.0], [1.0, 1.0], num_ic=5), collocation_points=50)
    with pytest.raises(SolverFailure) as info:
        run_kpi(sys_, GameCost(quadratic_state_cost), MonomialDictionary([[2, 0], [0, 2]]),
                FeedbackPolicy.zero(), cfg)
    assert info.value.result is not None
    assert info.value.result.termination_reason == "solver_failure"


def test_dimension_mismatch(f16):
    with pytest.raises(ValueError):
        run_kpi(f16.system, f16.cost, MonomialDictionary([[2, 0]]), f16.initial_control, f16.default_config)


def test_data_driven_agrees_with_model_based():
    model = solve(example2_problem(math.inf)).final_value.coefficients
    data = solve(example2_problem(math.inf), mode="data_driven")
    assert data.converged
    assert np.max(np.abs(data.final_value.coefficients - model)) < 0.02


@pytest.mark.slow
def test_data_driven_f16_reproduces_published(f16):
    from koopgame.benchmarks import f16_problem
    result = solve(f16_problem(), mode="data_driven")
    assert result.converged
    assert np.max(np.abs(result.final_value.coefficients - F16_V_PUBLISHED)) < 0.01
