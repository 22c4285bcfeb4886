"""Policy updates: vanilla policy gradient, TRPO and PPO.

All updates work on a flat parameter vector ``theta`` for a
:class:`~discretepolicy.distributions.PolicyNetwork` and return a new vector;
the inputs are never modified.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..diffmath import tensor as T
from ..diffmath.functional import hessian_vector_operator, value_and_grad
from ..distributions import PolicyDistribution, PolicyNetwork, entropy, kl, log_prob
from ..errors import InvalidConfig, NumericError
from .optim import AdamState, adam_step, conjugate_gradient
from .rollout import AdvantageEstimate, RolloutBatch

ALGORITHMS = ("ppo", "trpo", "vpg")


@dataclass(frozen=True)
class AlgoConfig:
    """Hyper-parameters shared by the three algorithms.

    ``lr`` is the PPO/vanilla step size, ``delta`` the TRPO bound on mean KL.
    """

    algo: str = "ppo"
    lr: float = 3e-4
    clip: float = 0.2
    epochs: int = 10
    minibatch: int = 64
    delta: float = 0.01
    cg_iters: int = 10
    cg_damping: float = 0.1
    backtrack: float = 0.5
    max_backtracks: int = 10
    batch_size: int = 2048
    gamma: float = 0.99
    lam: float = 0.95
    entropy_coef: float = 0.0
    normalize_adv: bool = True
    value_lr: float = 1e-3
    value_epochs: int = 10
    value_minibatch: int = 64

    def __post_init__(self) -> None:
        if self.algo not in ALGORITHMS:
            raise InvalidConfig(f"unknown algorithm {self.algo!r}; expected one of {', '.join(ALGORITHMS)}")
        if not 0.0 < self.clip < 1.0:
            raise InvalidConfig(f"clip must lie in (0, 1), got {self.clip}")
        if not self.delta > 0.0:
            raise InvalidConfig(f"delta must be positive, got {self.delta}")
        if not self.lr >= 0.0:
            raise InvalidConfig(f"learning rate must be non-negative, got {self.lr}")
        if not 0.0 < self.backtrack < 1.0:
            raise InvalidConfig(f"backtrack factor must lie in (0, 1), got {self.backtrack}")
        if not 0.0 <= self.gamma < 1.0:
            raise InvalidConfig(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidConfig(f"lambda must lie in [0, 1], got {self.lam}")
        counts = ("epochs", "minibatch", "cg_iters", "max_backtracks", "batch_size", "value_epochs", "value_minibatch")
        for name in counts:
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass
class UpdateResult:
    theta: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    opt_state: AdamState | None = None


# --- objectives ----------------------------------------------------------


def clipped_surrogate(ratio, advantages, clip: float) -> T.Tensor:
    """Per-sample ``min(rho * A, clip(rho, 1 - clip, 1 + clip) * A)``."""
    ratio = T.as_tensor(ratio)
    adv = T.as_tensor(advantages)
    return T.minimum(ratio * adv, T.clip(ratio, 1.0 - clip, 1.0 + clip) * adv)


def _ratio(dist: PolicyDistribution, batch_actions, behavior_log_prob) -> T.Tensor:
    return T.exp(log_prob(dist, batch_actions) - behavior_log_prob)


def pg_objective(policy: PolicyNetwork, theta, obs, actions, advantages, entropy_coef: float = 0.0):
    """``mean(A * log pi(a|s))`` (+ entropy bonus); its gradient is the policy gradient."""
    dist = policy.forward(theta, obs)
    out = T.mean(log_prob(dist, actions) * advantages)
    if entropy_coef:
        out = out + entropy_coef * T.mean(entropy(dist))
    return out


def importance_objective(policy: PolicyNetwork, theta, obs, actions, advantages, entropy_coef: float = 0.0):
    """``mean(rho * A)`` with ``rho`` relative to the behavior log-probabilities."""
    dist = policy.forward(theta, obs)
    out = T.mean(_ratio(dist, actions, actions.behavior_log_prob) * advantages)
    if entropy_coef:
        out = out + entropy_coef * T.mean(entropy(dist))
    return out


def ppo_objective(policy: PolicyNetwork, theta, obs, actions, advantages, clip: float, entropy_coef: float = 0.0):
    dist = policy.forward(theta, obs)
    ratio = _ratio(dist, actions, actions.behavior_log_prob)
    out = T.mean(clipped_surrogate(ratio, advantages, clip))
    if entropy_coef:
        out = out + entropy_coef * T.mean(entropy(dist))
    return out, ratio


def mean_kl(policy: PolicyNetwork, old: PolicyDistribution, theta, obs) -> T.Tensor:
    return T.mean(kl(old, policy.forward(theta, obs)))


def _measured_kl(policy, old, theta, obs) -> float:
    with T.no_grad():
        return float(mean_kl(policy, old, theta, obs).value)


def _old_distribution(policy, theta, obs) -> PolicyDistribution:
    with T.no_grad():
        return policy.forward(theta, obs).detach()


def _require_finite(value, what: str, head: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite {what}", head=head)


# --- updates -------------------------------------------------------------


def vanilla_pg_update(
    policy: PolicyNetwork,
    theta: np.ndarray,
    batch: RolloutBatch,
    adv: AdvantageEstimate,
    learning_rate: float,
    entropy_coef: float = 0.0,
) -> UpdateResult:
    """One full-batch ascent step ``theta + lr * grad mean(A log pi)``."""
    theta = np.asarray(theta, dtype=np.float64)
    obj, grad = value_and_grad(
        lambda th: pg_objective(policy, th, batch.obs, batch.actions, adv.advantages, entropy_coef),
        theta,
    )
    _require_finite(grad, "policy gradient", policy.head)
    new = theta + learning_rate * grad
    old = _old_distribution(policy, theta, batch.obs)
    return UpdateResult(
        new,
        {"surrogate": obj, "grad_norm": float(np.linalg.norm(grad)), "kl": _measured_kl(policy, old, new, batch.obs)},
    )


def ppo_update(
    policy: PolicyNetwork,
    theta: np.ndarray,
    batch: RolloutBatch,
    adv: AdvantageEstimate,
    config: AlgoConfig,
    rng: np.random.Generator,
    opt_state: AdamState | None = None,
) -> UpdateResult:
    """Epochs of shuffled minibatch Adam ascent on the clipped surrogate."""
    theta = np.asarray(theta, dtype=np.float64)
    state = opt_state or AdamState.zeros(theta.size)
    old = _old_distribution(policy, theta, batch.obs)
    n = len(batch)
    size = min(config.minibatch, n)
    clipped, ratios, approx_kl, count = 0.0, 0.0, 0.0, 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, size):
            idx = order[start : start + size]
            acts = batch.actions[idx]
            th = T.Tensor(theta, requires_grad=True)
            obj, ratio = ppo_objective(
                policy, th, batch.obs[idx], acts, adv.advantages[idx], config.clip, config.entropy_coef
            )
            _require_finite(obj.value, "PPO objective", policy.head)
            (grad,) = T.grad(T.neg(obj), [th])
            _require_finite(grad.value, "PPO gradient", policy.head)
            theta, state = adam_step(theta, grad.value, state, config.lr)
            r = ratio.value
            clipped += float(np.sum(np.abs(r - 1.0) > config.clip))
            ratios += float(np.sum(r))
            approx_kl += float(np.sum(-np.log(r)))
            count += len(idx)
    _require_finite(theta, "policy parameters", policy.head)
    with T.no_grad():
        surrogate = float(
            importance_objective(policy, theta, batch.obs, batch.actions, adv.advantages).value
        )
    return UpdateResult(
        theta,
        {
            "surrogate": surrogate,
            "kl": _measured_kl(policy, old, theta, batch.obs),
            "approx_kl": approx_kl / count,
            "clip_frac": clipped / count,
            "ratio_mean": ratios / count,
        },
        state,
    )


def natural_step(surrogate_fn, kl_fn, theta: np.ndarray, config: AlgoConfig):
    """Surrogate gradient ``g``, CG solution ``x ~ F^-1 g`` and the scaled full step.

    ``F`` is the Hessian of ``kl_fn`` at ``theta`` plus ``cg_damping * I``.
    Returns ``(objective, g, x, full_step)``; ``x`` and the step are ``None``
    when the gradient vanishes.
    """
    f0, g = value_and_grad(surrogate_fn, theta)
    if not np.isfinite(f0) or not np.all(np.isfinite(g)):
        raise NumericError("non-finite TRPO surrogate or gradient")
    if not np.any(g):
        return f0, g, None, None
    hvp = hessian_vector_operator(kl_fn, theta)

    def fisher(v):
        return hvp(v) + config.cg_damping * v

    x = conjugate_gradient(fisher, g, iters=config.cg_iters).x
    shs = float(x @ fisher(x))
    if not shs > 0.0:
        raise NumericError(f"TRPO step has non-positive curvature {shs:.3e}")
    return f0, g, x, np.sqrt(2.0 * config.delta / shs) * x


def trpo_update(
    policy: PolicyNetwork,
    theta: np.ndarray,
    batch: RolloutBatch,
    adv: AdvantageEstimate,
    config: AlgoConfig,
) -> UpdateResult:
    """Natural-gradient step under a mean-KL trust region with backtracking.

    A candidate is accepted when it improves the surrogate and its measured
    mean KL is at most ``delta``. If no candidate qualifies the old
    parameters are returned and the step is flagged as rejected.
    """
    theta = np.asarray(theta, dtype=np.float64)
    old = _old_distribution(policy, theta, batch.obs)
    A = adv.advantages

    def surrogate(th):
        return importance_objective(policy, th, batch.obs, batch.actions, A, config.entropy_coef)

    def kl_fn(th):
        return mean_kl(policy, old, th, batch.obs)

    try:
        f0, g, _, step = natural_step(surrogate, kl_fn, theta, config)
    except NumericError as exc:
        raise NumericError(exc.message, head=policy.head) from exc
    diag = {"surrogate": f0, "kl": 0.0, "improvement": 0.0, "backtracks": 0, "rejected": False, "degenerate": False}
    if step is None:
        diag.update(rejected=True, degenerate=True)
        return UpdateResult(theta.copy(), diag)
    for i in range(config.max_backtracks):
        candidate = theta + config.backtrack**i * step
        try:
            with T.no_grad():
                f = float(surrogate(candidate).value)
            measured = _measured_kl(policy, old, candidate, batch.obs)
        except NumericError:
            continue
        if np.isfinite(f) and np.isfinite(measured) and f - f0 > 0.0 and measured <= config.delta:
            diag.update(surrogate=f, kl=measured, improvement=f - f0, backtracks=i)
            return UpdateResult(candidate, diag)
    diag.update(rejected=True, backtracks=config.max_backtracks)
    return UpdateResult(theta.copy(), diag)
