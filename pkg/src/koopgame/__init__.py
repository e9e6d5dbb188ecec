"""Koopman policy iteration for two-player zero-sum differential games."""

__version__ = "0.1.0"

from .basis import MonomialDictionary
from .dynamics import (ControlAffineSystem, FeedbackPolicy, SamplingConfig, SnapshotData,
                       closed_loop_field, generate_snapshots, integrate_rk4, sample_states)
from .koopman import (GeneratorMatrix, RegressionSettings, edmd_operator, generator_from_operator,
                      generator_model_based, project_function)
from .kpi import (GameCost, KpiConfig, KpiResult, ValueFunction, adversary_update, build_rhs,
                  control_update, hji_residual, policy_evaluation, run_kpi)

__all__ = [
    "MonomialDictionary", "ControlAffineSystem", "FeedbackPolicy", "SamplingConfig", "SnapshotData",
    "closed_loop_field", "generate_snapshots", "integrate_rk4", "sample_states", "GeneratorMatrix",
    "RegressionSettings", "edmd_operator", "generator_from_operator", "generator_model_based",
    "project_function", "GameCost", "KpiConfig", "KpiResult", "ValueFunction", "adversary_update",
    "build_rhs", "control_update", "hji_residual", "policy_evaluation", "run_kpi",
]
