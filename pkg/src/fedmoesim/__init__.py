"""Deterministic simulator and scheduler for federated mixture-of-experts training."""

__version__ = "0.1.0"

from .datagen import ClientDataset, TaskSpec, gen_client_data, gen_tasks, gen_test_data, oracle_alignment
from .errors import ConfigError, InputError
from .federation import RoundRecord, SimConfig, World, build_world, round_time, run_round, run_simulation, select_clients
from .harness import (
    ExperimentSummary,
    OutputConflictError,
    RunResult,
    alignment_recovery,
    load_stats,
    rounds_to_target,
    run_experiment,
)
from .model import (
    ClientUpdate,
    ExpertParams,
    ModelDims,
    MoEParams,
    RoutingStats,
    aggregate,
    evaluate,
    forward,
    init_params,
    load_params,
    local_train,
    loss_and_grad,
    save_params,
)
from .scheduler import (
    AssignmentPlan,
    ClientCapacityProfile,
    ExpertResourceSpec,
    RewardObservation,
    ScoreState,
    assign_round,
    candidate_experts,
    coverage_repair,
    desirability,
    init_scores,
    max_experts,
    update_fitness,
    update_usage,
)

__all__ = [
    "AssignmentPlan",
    "ClientCapacityProfile",
    "ClientDataset",
    "ClientUpdate",
    "ConfigError",
    "ExperimentSummary",
    "ExpertParams",
    "ExpertResourceSpec",
    "InputError",
    "ModelDims",
    "MoEParams",
    "OutputConflictError",
    "RewardObservation",
    "RoundRecord",
    "RoutingStats",
    "RunResult",
    "ScoreState",
    "SimConfig",
    "TaskSpec",
    "World",
    "aggregate",
    "alignment_recovery",
    "assign_round",
    "build_world",
    "candidate_experts",
    "coverage_repair",
    "desirability",
    "evaluate",
    "forward",
    "gen_client_data",
    "gen_tasks",
    "gen_test_data",
    "init_params",
    "init_scores",
    "load_params",
    "load_stats",
    "local_train",
    "loss_and_grad",
    "max_experts",
    "oracle_alignment",
    "rounds_to_target",
    "round_time",
    "run_experiment",
    "run_round",
    "run_simulation",
    "save_params",
    "select_clients",
    "update_fitness",
    "update_usage",
]
