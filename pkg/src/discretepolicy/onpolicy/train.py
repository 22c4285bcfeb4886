"""One training run: rollouts, advantage estimation, policy and value updates.

Seeding: a run is identified by ``(master_seed, seed)``. Its root sequence is
``SeedSequence(master_seed, spawn_key=(seed,))`` and each consumer gets the
child ``spawn_key=(seed, k)`` for a fixed counter ``k`` (see ``STREAMS``), so
adding seeds or consumers never changes the numbers an existing run sees.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ..distributions import CATEGORICAL_HEADS, PolicyNetwork
from ..envs import env_spec, make_env
from ..errors import InvalidConfig, NumericError
from .algorithms import AlgoConfig, ppo_update, trpo_update, vanilla_pg_update
from .optim import AdamState
from .rollout import Runner, gae
from .value import ValueNetwork, value_fit

STREAMS = {"env": 0, "policy_init": 1, "value_init": 2, "actions": 3, "updates": 4, "value_fit": 5}


def stream(master_seed: int, seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence(master_seed, spawn_key=(seed, STREAMS[name]))


def rng_for(master_seed: int, seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream(master_seed, seed, name))


@dataclass(frozen=True)
class TrainConfig:
    env: str
    head: str
    bins: int | None = None
    steps: int = 100_000
    algo: AlgoConfig = field(default_factory=AlgoConfig)
    hidden: tuple[int, ...] = (64, 64)
    value_hidden: tuple[int, ...] = (64, 64)
    master_seed: int = 0
    final_fraction: float = 0.1

    def __post_init__(self) -> None:
        env_spec(self.env)
        if (self.head in CATEGORICAL_HEADS) != (self.bins is not None):
            raise InvalidConfig(
                f"--bins is required for the {self.head} head"
                if self.head in CATEGORICAL_HEADS
                else f"--bins is only valid for discrete/ordinal heads, not {self.head}"
            )
        if self.steps < 1:
            raise InvalidConfig(f"steps must be >= 1, got {self.steps}")
        object.__setattr__(self, "hidden", tuple(self.hidden))
        object.__setattr__(self, "value_hidden", tuple(self.value_hidden))

    @property
    def policy_network(self) -> PolicyNetwork:
        spec = env_spec(self.env)
        return PolicyNetwork(spec.obs_dim, spec.act_dim, self.head, self.bins, self.hidden)

    @property
    def value_network(self) -> ValueNetwork:
        return ValueNetwork(env_spec(self.env).obs_dim, self.value_hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["value_hidden"] = list(self.value_hidden)
        return d


@dataclass
class IterationRecord:
    iteration: int
    steps: int
    mean_return: float
    std_return: float
    kl: float
    clip_frac: float
    surrogate: float
    rejected: bool
    wall_ms: float
    episodes: int


@dataclass
class RunResult:
    config: TrainConfig
    seed: int
    records: list[IterationRecord]
    episode_returns: list[tuple[int, float]]
    theta: np.ndarray
    terminated_early: bool = False
    error: str | None = None

    @property
    def final_return(self) -> float:
        """Mean episode return over the last ``final_fraction`` of environment steps."""
        if not self.episode_returns:
            return math.nan
        last_step = self.episode_returns[-1][0]
        if self.records:
            last_step = max(last_step, self.records[-1].steps)
        cutoff = last_step - self.config.final_fraction * self.config.steps
        tail = [r for s, r in self.episode_returns if s > cutoff]
        if not tail:
            tail = [self.episode_returns[-1][1]]
        return float(np.mean(tail))


def train(config: TrainConfig, seed: int, on_record=None) -> RunResult:
    """Train one policy; numeric failures end the run early instead of raising."""
    algo = config.algo
    policy = config.policy_network
    value_net = config.value_network
    master = config.master_seed
    theta = policy.init_flat(rng_for(master, seed, "policy_init"))
    phi = value_net.init_flat(rng_for(master, seed, "value_init"))
    env = make_env(config.env, stream(master, seed, "env"))
    runner = Runner(env, rng_for(master, seed, "actions"))
    update_rng = rng_for(master, seed, "updates")
    value_rng = rng_for(master, seed, "value_fit")
    policy_state = AdamState.zeros(theta.size)
    value_state = AdamState.zeros(phi.size)

    result = RunResult(config, seed, [], [], theta)
    steps_done = 0
    iteration = 0
    try:
        while steps_done < config.steps:
            start = time.perf_counter()
            T_steps = min(algo.batch_size, config.steps - steps_done)
            batch = runner.collect(policy, theta, T_steps, lambda o: value_net.predict(phi, o))
            adv = gae(batch, algo.gamma, algo.lam, normalize=algo.normalize_adv)
            if algo.algo == "ppo":
                upd = ppo_update(policy, theta, batch, adv, algo, update_rng, policy_state)
                policy_state = upd.opt_state
            elif algo.algo == "trpo":
                upd = trpo_update(policy, theta, batch, adv, algo)
            else:
                upd = vanilla_pg_update(policy, theta, batch, adv, algo.lr, algo.entropy_coef)
            theta = upd.theta
            fit = value_fit(
                value_net, phi, batch.obs, adv.returns, algo.value_epochs, algo.value_lr,
                value_rng, algo.value_minibatch, value_state,
            )
            phi, value_state = fit.params, fit.state
            steps_done += T_steps
            ends = np.cumsum(batch.dones)
            done_at = np.flatnonzero(batch.dones)
            for pos, ret in zip(done_at, batch.episode_returns):
                result.episode_returns.append((steps_done - T_steps + int(pos) + 1, float(ret)))
            returns = np.asarray(batch.episode_returns)
            d = upd.diagnostics
            record = IterationRecord(
                iteration=iteration,
                steps=steps_done,
                mean_return=float(returns.mean()) if returns.size else math.nan,
                std_return=float(returns.std()) if returns.size else math.nan,
                kl=float(d.get("kl", math.nan)),
                clip_frac=float(d.get("clip_frac", math.nan)),
                surrogate=float(d.get("surrogate", math.nan)),
                rejected=bool(d.get("rejected", False)),
                wall_ms=(time.perf_counter() - start) * 1e3,
                episodes=int(ends[-1]) if len(ends) else 0,
            )
            result.records.append(record)
            if on_record is not None:
                on_record(record)
            iteration += 1
    except NumericError as exc:
        result.terminated_early = True
        result.error = str(exc)
    result.theta = theta
    return result
