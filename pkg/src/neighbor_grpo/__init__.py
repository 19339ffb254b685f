"""Neighbor GRPO and an SDE-GRPO baseline for toy rectified-flow models."""

__version__ = "0.1.0"

from .config import ConfigError, ExperimentConfig
from .experiment import run_experiment, run_sweep
from .grpo import (AdvantageVector, GrpoObjectiveConfig, advantages_quasinorm, advantages_standard,
                   clipped_objective, compute_advantages)
from .mathcore import Adam, RngStream
from .neighbor import (NeighborGRPOTrainer, NumericalAbort, TrainLoopConfig, anchor_ratios, leap_policy,
                       neighbor_grpo_iteration, perturb_noise)
from .rewards import RewardFn, reward_eval
from .sde_baseline import SdeGRPOTrainer, drift_residual, gaussian_log_prob, sde_grpo_iteration
from .solvers import TimeSchedule, Trajectory, rollout, uniform_schedule
from .velocity import GaussianFlowOracle, VelocityModel, fm_pretrain, oracle_velocity

__all__ = [
    "Adam", "AdvantageVector", "ConfigError", "ExperimentConfig", "GaussianFlowOracle", "GrpoObjectiveConfig", "NeighborGRPOTrainer",
    "NumericalAbort", "RewardFn", "RngStream", "SdeGRPOTrainer", "TimeSchedule", "TrainLoopConfig",
    "Trajectory", "VelocityModel", "advantages_quasinorm", "advantages_standard", "anchor_ratios",
    "clipped_objective", "compute_advantages", "drift_residual", "fm_pretrain", "gaussian_log_prob",
    "leap_policy", "neighbor_grpo_iteration", "oracle_velocity", "perturb_noise", "reward_eval",
    "rollout", "run_experiment", "run_sweep", "sde_grpo_iteration", "uniform_schedule",
]
