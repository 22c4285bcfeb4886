"""Rollout collection and generalized advantage estimation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..diffmath import tensor as T
from ..distributions import ActionSample, PolicyNetwork, sample
from ..envs import Env
from ..errors import ContractViolation, InvalidConfig, NumericError


@dataclass
class RolloutBatch:
    """T consecutive environment steps; episode ends are marked by ``dones``.

    ``values`` are value predictions for ``obs``; ``last_value`` bootstraps the
    step after the final one (zero when that step ended an episode).
    """

    obs: np.ndarray
    actions: ActionSample
    rewards: np.ndarray
    dones: np.ndarray
    values: np.ndarray
    last_value: float = 0.0
    episode_returns: list[float] = field(default_factory=list)
    episode_lengths: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        n = len(self.obs)
        lengths = {len(self.actions), len(self.rewards), len(self.dones), len(self.values)}
        if lengths != {n}:
            raise ContractViolation(f"rollout arrays disagree in length: {sorted(lengths | {n})}")
        if not np.all(np.isfinite(self.actions.behavior_log_prob)):
            raise NumericError("non-finite behavior log-probability in rollout")
        if not np.all(np.isfinite(self.values)):
            raise NumericError("non-finite value prediction in rollout")

    def __len__(self) -> int:
        return len(self.obs)

    @property
    def behavior_log_prob(self) -> np.ndarray:
        return self.actions.behavior_log_prob


@dataclass
class AdvantageEstimate:
    advantages: np.ndarray
    returns: np.ndarray
    gamma: float
    lam: float
    normalized: bool = False


class Runner:
    """Steps one environment with a policy, carrying episodes across batches."""

    def __init__(self, env: Env, rng: np.random.Generator) -> None:
        self.env = env
        self.rng = rng
        self.obs: np.ndarray | None = None
        self.ep_return = 0.0
        self.ep_length = 0
        self.total_steps = 0

    def collect(
        self,
        policy: PolicyNetwork,
        theta: np.ndarray,
        T_steps: int,
        value_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    ) -> RolloutBatch:
        if T_steps < 1:
            raise InvalidConfig(f"rollout length must be >= 1, got {T_steps}")
        params = policy.layout.unflatten(np.asarray(theta, dtype=np.float64))
        obs_buf = np.empty((T_steps, self.env.spec.obs_dim))
        rewards = np.empty(T_steps)
        dones = np.zeros(T_steps, dtype=bool)
        actions = []
        returns, lengths = [], []
        with T.no_grad():
            for t in range(T_steps):
                if self.obs is None:
                    self.obs = self.env.reset()
                obs_buf[t] = self.obs
                try:
                    dist = policy.forward(params, self.obs[None, :])
                    action = sample(dist, self.rng)
                    result = self.env.step(action.continuous[0])
                except NumericError as exc:
                    raise exc.with_step(self.total_steps + t) from exc
                actions.append(action)
                rewards[t] = result.reward
                self.ep_return += result.reward
                self.ep_length += 1
                if result.done:
                    dones[t] = True
                    returns.append(self.ep_return)
                    lengths.append(self.ep_length)
                    self.ep_return, self.ep_length = 0.0, 0
                    self.obs = None
                else:
                    self.obs = result.obs
        self.total_steps += T_steps
        if value_fn is None:
            values, last_value = np.zeros(T_steps), 0.0
        else:
            tail = [] if self.obs is None else [self.obs]
            predicted = value_fn(np.vstack([obs_buf, *tail]) if tail else obs_buf)
            values = predicted[:T_steps]
            last_value = float(predicted[T_steps]) if tail else 0.0
        return RolloutBatch(
            obs=obs_buf,
            actions=ActionSample.stack(actions),
            rewards=rewards,
            dones=dones,
            values=np.asarray(values, dtype=np.float64),
            last_value=last_value,
            episode_returns=returns,
            episode_lengths=lengths,
        )


def collect_rollout(
    policy: PolicyNetwork,
    theta: np.ndarray,
    env: Env,
    T_steps: int,
    rng: np.random.Generator,
    value_fn: Callable[[np.ndarray], np.ndarray] | None = None,
) -> RolloutBatch:
    """Exactly ``T_steps`` steps starting from a fresh episode."""
    return Runner(env, rng).collect(policy, theta, T_steps, value_fn)


def gae(batch: RolloutBatch, gamma: float, lam: float, normalize: bool = False) -> AdvantageEstimate:
    """Lambda-weighted TD residuals accumulated backwards, cut at episode ends.

    ``returns`` are raw advantages plus value predictions; ``normalize``
    rescales only the advantages to mean 0 and std 1.
    """
    if not 0.0 <= gamma <= 1.0:
        raise InvalidConfig(f"gamma must lie in [0, 1], got {gamma}")
    if not 0.0 <= lam <= 1.0:
        raise InvalidConfig(f"lambda must lie in [0, 1], got {lam}")
    n = len(batch)
    values = batch.values
    next_values = np.append(values[1:], batch.last_value)
    nonterminal = 1.0 - batch.dones.astype(np.float64)
    deltas = batch.rewards + gamma * next_values * nonterminal - values
    adv = np.empty(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        running = deltas[t] + gamma * lam * nonterminal[t] * running
        adv[t] = running
    returns = adv + values
    if normalize:
        adv = normalize_advantages(adv)
    return AdvantageEstimate(adv, returns, gamma, lam, normalize)


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)
