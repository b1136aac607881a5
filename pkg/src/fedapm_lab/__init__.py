"""Federated optimization with ADMM and partial model personalization.

FedAPM alongside FedAvg, FedProx, FedAlt and FedSim on synthetic
heterogeneous problems, plus numerical checks of the convergence theory.
"""

from .baselines import (BaselineConfig, fedalt_round, fedavg_round, fedprox_round,
                        fedsim_round, init_baseline_state)
from .datagen import (SyntheticSpec, consensus_solution, dirichlet_partition,
                      make_classification_problem, make_quadratic_problem)
from .diagnostics import (TheoryTrace, drift_metric, lyapunov_value, rate_fit,
                          stationarity_residuals, traced_run)
from .engine import (ClientState, FederationState, HyperparamCheck, InnerConfig,
                     aggregate, aug_lagrangian_i, init_federation, penalty_mode_round,
                     run_round, select_clients, solve_u_approx, solve_v_prox,
                     update_dual_and_z)
from .errors import (ConfigError, ContractViolation, DivergenceError, EstimationError,
                     FedAPMError, GenerationError, InvalidObjectiveError)
from .numcore import (LipschitzEstimates, QuadraticObjective, SoftmaxSplitObjective,
                      SplitSpec, estimate_lipschitz, finite_diff_grad, loss_and_grads)

__version__ = "0.1.0"

__all__ = [
    "BaselineConfig",
    "fedalt_round",
    "fedavg_round",
    "fedprox_round",
    "fedsim_round",
    "init_baseline_state",
    "SyntheticSpec",
    "consensus_solution",
    "dirichlet_partition",
    "make_classification_problem",
    "make_quadratic_problem",
    "TheoryTrace",
    "drift_metric",
    "lyapunov_value",
    "rate_fit",
    "stationarity_residuals",
    "traced_run",
    "ClientState",
    "FederationState",
    "HyperparamCheck",
    "InnerConfig",
    "aggregate",
    "aug_lagrangian_i",
    "init_federation",
    "penalty_mode_round",
    "run_round",
    "select_clients",
    "solve_u_approx",
    "solve_v_prox",
    "update_dual_and_z",
    "ConfigError",
    "ContractViolation",
    "DivergenceError",
    "EstimationError",
    "FedAPMError",
    "GenerationError",
    "InvalidObjectiveError",
    "LipschitzEstimates",
    "QuadraticObjective",
    "SoftmaxSplitObjective",
    "SplitSpec",
    "estimate_lipschitz",
    "finite_diff_grad",
    "loss_and_grads",
]
