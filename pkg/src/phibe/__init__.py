"""Continuous-time RL from discrete-time trajectories: policy evaluation and iteration."""

from .basis import (
    merton_q_basis,
    merton_value_basis,
    quadratic_state_action_basis,
    quadratic_state_basis,
)
from .coefficients import error_constant, fd_coefficients
from .environments import (
    LqrSystem,
    MertonMarket,
    TrajectoryBatch,
    lqr_exact_transition,
    sample_lqr_batch,
    sample_merton_batch,
    sample_policy_lqr_batch,
    sample_policy_merton_batch,
    spawn_rng,
)
from .errors import ConfigError, NumericalError
from .experiments import (
    SCHEMA_VERSION,
    ExperimentConfig,
    ResultRecord,
    batch_sweep,
    dt_sweep,
    error_atlas,
    load_config,
    oracle_report,
    run_case,
)
from .oracles import (
    EffectiveDynamics,
    QuadraticValue,
    be_optimal,
    be_optimal_1d,
    l2_distance_on_box,
    lqr_error_oracle,
    lqr_optimal,
    lqr_optimal_1d,
    lqr_policy_value,
    merton_error_oracle,
    merton_optimal,
    merton_policy_value,
    phibe_effective_dynamics,
    phibe_optimal,
)
from .policy_eval import (
    CoefficientVector,
    ValueEstimate,
    be_policy_evaluation,
    discount_factor,
    phibe_galerkin_from_estimates,
    phibe_policy_evaluation,
)
from .policy_iteration import (
    BatchPlan,
    IterationTrace,
    LinearPolicy,
    improve_policy,
    optimal_be_pi,
    optimal_phibe_pi,
)
from .q_approx import (
    QEstimate,
    be_q_evaluation,
    phibe_q_from_estimates,
    phibe_q_galerkin,
    phibe_q_gradient_descent,
)

__version__ = "0.1.0"

__all__ = [
    "BatchPlan",
    "CoefficientVector",
    "ConfigError",
    "EffectiveDynamics",
    "ExperimentConfig",
    "IterationTrace",
    "LinearPolicy",
    "LqrSystem",
    "MertonMarket",
    "NumericalError",
    "QEstimate",
    "QuadraticValue",
    "ResultRecord",
    "SCHEMA_VERSION",
    "TrajectoryBatch",
    "ValueEstimate",
    "batch_sweep",
    "be_optimal",
    "be_optimal_1d",
    "be_policy_evaluation",
    "be_q_evaluation",
    "discount_factor",
    "dt_sweep",
    "error_atlas",
    "error_constant",
    "fd_coefficients",
    "improve_policy",
    "l2_distance_on_box",
    "load_config",
    "lqr_error_oracle",
    "lqr_exact_transition",
    "lqr_optimal",
    "lqr_optimal_1d",
    "lqr_policy_value",
    "merton_error_oracle",
    "merton_optimal",
    "merton_policy_value",
    "merton_q_basis",
    "merton_value_basis",
    "optimal_be_pi",
    "optimal_phibe_pi",
    "oracle_report",
    "phibe_effective_dynamics",
    "phibe_galerkin_from_estimates",
    "phibe_optimal",
    "phibe_policy_evaluation",
    "phibe_q_from_estimates",
    "phibe_q_galerkin",
    "phibe_q_gradient_descent",
    "quadratic_state_action_basis",
    "quadratic_state_basis",
    "run_case",
    "sample_lqr_batch",
    "sample_merton_batch",
    "sample_policy_lqr_batch",
    "sample_policy_merton_batch",
    "spawn_rng",
    "__version__",
]
