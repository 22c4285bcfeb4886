"""Experiments over the number of atoms K and over learning rates.

``variance_scan``
    variance of the single-sample score gradient on the shared encoder at
    initialization, against the ``(K - 1) / K`` law.
``capacity_scan``
    final training return of discrete policies for several K.
``cost_scan``
    wall time of a fixed training budget per K, relative to a Gaussian head.
``sensitivity_scan``
    final returns under randomly drawn learning rates, seeds and K.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .diffmath import tensor as T
from .diffmath.network import NetworkParams, scaled_uniform
from .distributions import (
    CATEGORICAL_HEADS,
    HEAD_KINDS,
    OUTPUT_SCALE,
    ActionSample,
    PolicyNetwork,
    log_prob,
)
from .envs import env_spec, make_env
from .errors import InvalidConfig
from .onpolicy.algorithms import AlgoConfig
from .onpolicy.train import TrainConfig, train

VARIANCE_ANCHOR = 50
SENSITIVITY_LOG10_LR = (-6.0, -3.0)
SENSITIVITY_BINS = (7, 11, 15)
SENSITIVITY_SEEDS = 5
QUANTILES = (0.0, 0.25, 0.5, 0.75, 1.0)


def theoretical_variance(K, anchor: int = VARIANCE_ANCHOR) -> np.ndarray:
    """``(K - 1) / K`` scaled to 1 at ``anchor``."""
    K = np.asarray(K, dtype=np.float64)
    return ((K - 1.0) / K) / ((anchor - 1.0) / anchor)


# --- gradient variance ----------------------------------------------------


@dataclass(frozen=True)
class VarianceScanResult:
    K: list[int]
    empirical_norm: np.ndarray
    theoretical_norm: np.ndarray
    raw_variance: np.ndarray
    raw_stderr: np.ndarray
    n_inits: int
    n_grad_samples: int
    anchor: int

    def rows(self) -> list[dict]:
        return [
            {
                "K": k,
                "empirical_norm": float(e),
                "theoretical_norm": float(t),
                "raw_variance": float(v),
                "raw_stderr": float(s),
            }
            for k, e, t, v, s in zip(self.K, self.empirical_norm, self.theoretical_norm, self.raw_variance, self.raw_stderr)
        ]


def encoder_score_table(policy: PolicyNetwork, params: NetworkParams, obs: np.ndarray) -> np.ndarray:
    """Row ``j``: gradient of ``log p(atom j | obs)`` with respect to the encoder weights.

    Single-dimension categorical policies only. The encoder is the part of the
    flat parameter vector shared by every K.
    """
    if policy.head not in CATEGORICAL_HEADS or policy.act_dim != 1:
        raise InvalidConfig("the score table needs a one-dimensional categorical policy")
    flat = params.flatten()
    enc = policy.layout.encoder_slice()
    rows = []
    for j in range(policy.bins):
        th = T.Tensor(flat, requires_grad=True)
        action = ActionSample(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1), np.array([[j]]))
        lp = T.sum_(log_prob(policy.forward(th, obs[None, :]), action))
        (g,) = T.grad(lp, [th])
        rows.append(g.value[enc])
    return np.array(rows)


def _score_variance(table: np.ndarray, counts: np.ndarray, reward: float) -> float:
    """Unbiased total variance of ``reward * table[a]`` given how often each row was drawn."""
    n = counts.sum()
    g = reward * table
    mean = counts @ g / n
    second = counts @ np.sum(g * g, axis=1)
    return float((second - n * mean @ mean) / (n - 1))


def variance_scan(
    env: str,
    K_list,
    n_inits: int = 20,
    n_grad_samples: int = 10_000,
    rng: np.random.Generator | int | None = 0,
    anchor: int | None = None,
    reward: float = 1.0,
    hidden: tuple[int, ...] = (64, 64),
) -> VarianceScanResult:
    """Score-gradient variance on the encoder at initialization under constant reward.

    Initialization ``i`` shares its encoder and its observation across every
    K. The output rows for smaller K are the leading rows of one draw at the
    largest K, which has the same fan-in distribution for every K, and the
    action draws reuse the same uniforms, so differences between K come from
    K alone rather than from independent noise.
    """
    K_list = [int(k) for k in K_list]
    if anchor is None:
        if VARIANCE_ANCHOR not in K_list:
            raise InvalidConfig(f"K list must contain the anchor K={VARIANCE_ANCHOR} or name an explicit anchor")
        anchor = VARIANCE_ANCHOR
    if anchor not in K_list:
        K_list = [*K_list, anchor]
    if any(k < 2 for k in K_list):
        raise InvalidConfig("every K must be >= 2")
    if n_inits < 1 or n_grad_samples < 2:
        raise InvalidConfig("need n_inits >= 1 and n_grad_samples >= 2")
    spec = env_spec(env)
    if spec.act_dim != 1:
        raise InvalidConfig(f"variance scan needs a one-dimensional action space, {env} has {spec.act_dim}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    k_max = max(K_list)
    raw = np.zeros((n_inits, len(K_list)))
    for i in range(n_inits):
        base = PolicyNetwork(spec.obs_dim, 1, "discrete", k_max, hidden)
        encoder = base.init(rng).layers
        head_w, head_b = scaled_uniform(rng, k_max, base.feature_dim, scale=OUTPUT_SCALE)
        obs = make_env(env, rng.integers(2**63)).reset()
        u = 1.0 - rng.random(n_grad_samples)
        for c, K in enumerate(K_list):
            policy = PolicyNetwork(spec.obs_dim, 1, "discrete", K, hidden)
            params = NetworkParams(encoder, {"head_w": head_w[:K], "head_b": head_b[:K]})
            table = encoder_score_table(policy, params, obs)
            with T.no_grad():
                p = policy.forward(params, obs[None, :]).probs()[0, 0]
            idx = np.minimum(np.searchsorted(np.cumsum(p), u), K - 1)
            counts = np.bincount(idx, minlength=K).astype(np.float64)
            raw[i, c] = _score_variance(table, counts, reward)
    mean = raw.mean(axis=0)
    stderr = raw.std(axis=0, ddof=1) / np.sqrt(n_inits) if n_inits > 1 else np.full(len(K_list), math.nan)
    a = K_list.index(anchor)
    return VarianceScanResult(
        K=K_list,
        empirical_norm=mean / mean[a],
        theoretical_norm=theoretical_variance(K_list, anchor),
        raw_variance=mean,
        raw_stderr=stderr,
        n_inits=n_inits,
        n_grad_samples=n_grad_samples,
        anchor=anchor,
    )


# --- capacity ------------------------------------------------------------


@dataclass(frozen=True)
class CapacityCell:
    K: int
    seed: int
    final_return: float
    terminated_early: bool
    error: str | None = None


@dataclass(frozen=True)
class CapacityScanResult:
    cells: list[CapacityCell]

    def returns(self, K: int) -> np.ndarray:
        return np.array([c.final_return for c in self.cells if c.K == K and c.error is None])

    def summary(self) -> dict[int, tuple[float, float]]:
        """Per K: mean final return and its standard error over seeds."""
        out = {}
        for K in dict.fromkeys(c.K for c in self.cells):
            r = self.returns(K)
            se = float(r.std(ddof=1) / np.sqrt(r.size)) if r.size > 1 else math.nan
            out[K] = (float(r.mean()) if r.size else math.nan, se)
        return out


def capacity_scan(
    env: str,
    K_list,
    algo_config: AlgoConfig | None = None,
    steps: int = 100_000,
    seeds=(0, 1, 2),
    master_seed: int = 0,
    head: str = "discrete",
) -> CapacityScanResult:
    """Train one policy per ``(K, seed)``; a failed cell is recorded and the scan goes on."""
    algo = algo_config or AlgoConfig()
    cells = []
    for K in K_list:
        for seed in seeds:
            config = TrainConfig(env, head, int(K), steps=steps, algo=algo, master_seed=master_seed)
            run = train(config, int(seed))
            cells.append(CapacityCell(int(K), int(seed), run.final_return, run.terminated_early, run.error))
    return CapacityScanResult(cells)


# --- cost ------------------------------------------------------------------


@dataclass(frozen=True)
class CostScanResult:
    labels: list[str]
    seconds: np.ndarray
    percent: np.ndarray

    def rows(self) -> list[dict]:
        return [
            {"head": label, "seconds": float(s), "percent": float(p)}
            for label, s, p in zip(self.labels, self.seconds, self.percent)
        ]


def cost_scan(
    env: str,
    K_list,
    steps: int = 4096,
    repeats: int = 3,
    algo_config: AlgoConfig | None = None,
    seed: int = 0,
) -> CostScanResult:
    """Wall time of ``steps`` training steps per head, Gaussian = 100%.

    Runs are interleaved round-robin and each cell keeps its fastest repeat,
    which damps drift and background noise. Timing is serial by design.
    """
    if repeats < 1:
        raise InvalidConfig("repeats must be >= 1")
    algo = algo_config or AlgoConfig(batch_size=min(2048, steps))
    configs = [TrainConfig(env, "gaussian", None, steps=steps, algo=algo)]
    configs += [TrainConfig(env, "discrete", int(K), steps=steps, algo=algo) for K in K_list]
    labels = ["gaussian", *(f"discrete-{int(K)}" for K in K_list)]
    best = np.full(len(configs), np.inf)
    for _ in range(repeats):
        for i, config in enumerate(configs):
            start = time.perf_counter()
            train(config, seed)
            best[i] = min(best[i], time.perf_counter() - start)
    return CostScanResult(labels, best, 100.0 * best / best[0])


# --- sensitivity -----------------------------------------------------------


@dataclass(frozen=True)
class SensitivityDraw:
    head: str
    log10_lr: float
    bins: int | None
    seed: int
    final_return: float
    terminated_early: bool


@dataclass(frozen=True)
class SensitivityResult:
    head: str
    draws: list[SensitivityDraw]
    quantiles: dict[float, float] = field(default_factory=dict)

    def quantile_rows(self) -> list[dict]:
        return [{"quantile": q, "final_return": v} for q, v in self.quantiles.items()]


def draw_sensitivity_configs(head: str, n_draws: int, rng: np.random.Generator) -> list[tuple[float, int | None, int]]:
    """``(log10 lr, K or None, seed)`` per draw, consumed from ``rng`` in a fixed order."""
    out = []
    for _ in range(n_draws):
        log_lr = float(rng.uniform(*SENSITIVITY_LOG10_LR))
        seed = int(rng.integers(SENSITIVITY_SEEDS))
        bins = int(rng.choice(SENSITIVITY_BINS)) if head in CATEGORICAL_HEADS else None
        out.append((log_lr, bins, seed))
    return out


def sensitivity_scan(
    env: str,
    head_kinds,
    n_draws: int = 30,
    rng: np.random.Generator | int | None = 0,
    steps: int = 100_000,
    algo_config: AlgoConfig | None = None,
) -> dict[str, SensitivityResult]:
    """PPO runs under random learning rates; failed runs score the environment minimum."""
    if n_draws < 1:
        raise InvalidConfig(f"n_draws must be >= 1, got {n_draws}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    base = algo_config or AlgoConfig()
    floor = env_spec(env).min_return
    results = {}
    for head in head_kinds:
        if head not in HEAD_KINDS:
            raise InvalidConfig(f"unknown head {head!r}")
        draws = []
        for log_lr, bins, seed in draw_sensitivity_configs(head, n_draws, rng):
            config = TrainConfig(env, head, bins, steps=steps, algo=replace(base, lr=10.0**log_lr))
            run = train(config, seed)
            value = run.final_return
            if run.terminated_early or not np.isfinite(value):
                value = floor
            draws.append(SensitivityDraw(head, log_lr, bins, seed, float(value), run.terminated_early))
        values = np.array([d.final_return for d in draws])
        quantiles = {q: float(np.quantile(values, q)) for q in QUANTILES}
        results[head] = SensitivityResult(head, draws, quantiles)
    return results
