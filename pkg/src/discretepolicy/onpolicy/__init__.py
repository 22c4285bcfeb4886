"""On-policy optimization: rollouts, GAE, value fitting, PPO / TRPO / vanilla PG."""

from .algorithms import (
    ALGORITHMS,
    AlgoConfig,
    UpdateResult,
    clipped_surrogate,
    importance_objective,
    mean_kl,
    natural_step,
    pg_objective,
    ppo_objective,
    ppo_update,
    trpo_update,
    vanilla_pg_update,
)
from .optim import AdamState, CGResult, adam_step, conjugate_gradient
from .rollout import AdvantageEstimate, RolloutBatch, Runner, collect_rollout, gae, normalize_advantages
from .train import IterationRecord, RunResult, TrainConfig, rng_for, stream, train
from .value import ValueFitResult, ValueNetwork, value_fit

__all__ = [
    "ALGORITHMS",
    "AdamState",
    "AdvantageEstimate",
    "AlgoConfig",
    "CGResult",
    "IterationRecord",
    "RolloutBatch",
    "RunResult",
    "Runner",
    "TrainConfig",
    "UpdateResult",
    "ValueFitResult",
    "ValueNetwork",
    "adam_step",
    "clipped_surrogate",
    "collect_rollout",
    "conjugate_gradient",
    "gae",
    "importance_objective",
    "mean_kl",
    "natural_step",
    "normalize_advantages",
    "pg_objective",
    "ppo_objective",
    "ppo_update",
    "rng_for",
    "stream",
    "train",
    "trpo_update",
    "value_fit",
    "vanilla_pg_update",
]
