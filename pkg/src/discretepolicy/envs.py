"""Small continuous-control tasks with action space [-1, 1]^m."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, InvalidConfig

# Wide local mode and narrow global mode. The global centre sits on an atom of
# the K = 11 grid (multiples of 0.2) so a discrete policy can reach it exactly.
WIDE_CENTRE, WIDE_WIDTH, WIDE_HEIGHT = -0.45, 0.25, 0.62
NARROW_CENTRE, NARROW_WIDTH, NARROW_HEIGHT = 0.6, 0.08, 1.0

_ACTION_TOL = 1e-12


def bandit_reward(a: float) -> float:
    """Bimodal one-step reward on [-1, 1]."""
    if not -1.0 - _ACTION_TOL <= a <= 1.0 + _ACTION_TOL:
        raise ContractViolation(f"bandit action {a} outside [-1, 1]")
    wide = WIDE_HEIGHT * np.exp(-((a - WIDE_CENTRE) ** 2) / (2 * WIDE_WIDTH**2))
    narrow = NARROW_HEIGHT * np.exp(-((a - NARROW_CENTRE) ** 2) / (2 * NARROW_WIDTH**2))
    return float(wide + narrow)


def bandit_reward_curve(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    wide = WIDE_HEIGHT * np.exp(-((a - WIDE_CENTRE) ** 2) / (2 * WIDE_WIDTH**2))
    narrow = NARROW_HEIGHT * np.exp(-((a - NARROW_CENTRE) ** 2) / (2 * NARROW_WIDTH**2))
    return wide + narrow


BANDIT_OPTIMUM = bandit_reward(NARROW_CENTRE)


@dataclass(frozen=True)
class EnvSpec:
    id: str
    obs_dim: int
    act_dim: int
    horizon: int
    min_return: float  # conservative lower bound on an episode's return


@dataclass(frozen=True)
class StepResult:
    obs: np.ndarray
    reward: float
    done: bool


class Env:
    """Base class: seeded at construction, deterministic given the action sequence."""

    spec: EnvSpec

    def __init__(self, seed: int | np.random.SeedSequence | None = None) -> None:
        self.rng = np.random.default_rng(seed)
        self.t = 0
        self._started = False

    def reset(self) -> np.ndarray:
        self.t = 0
        self._started = True
        return self._reset()

    def step(self, action) -> StepResult:
        if not self._started:
            raise ContractViolation("step() called before reset()")
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape != (self.spec.act_dim,):
            raise ContractViolation(f"{self.spec.id} expects {self.spec.act_dim} action values, got {a.shape}")
        if np.any(np.abs(a) > 1.0 + _ACTION_TOL) or not np.all(np.isfinite(a)):
            raise ContractViolation(f"action {a} outside [-1, 1]^{self.spec.act_dim}")
        obs, reward = self._step(np.clip(a, -1.0, 1.0))
        self.t += 1
        done = self.t >= self.spec.horizon
        if done:
            self._started = False
        return StepResult(obs, float(reward), done)

    def _reset(self) -> np.ndarray:
        raise NotImplementedError

    def _step(self, a: np.ndarray) -> tuple[np.ndarray, float]:
        raise NotImplementedError


class BimodalBandit(Env):
    spec = EnvSpec("bimodal-bandit", obs_dim=1, act_dim=1, horizon=1, min_return=0.0)

    def _reset(self) -> np.ndarray:
        return np.zeros(1)

    def _step(self, a):
        return np.zeros(1), bandit_reward(float(a[0]))


class PointMassReacher(Env):
    """Damped point mass in the plane driven towards a random goal.

    Starts at rest at the origin; the goal is uniform in [-1, 1]^2.
    """

    spec = EnvSpec("pointmass-reacher", obs_dim=6, act_dim=2, horizon=64, min_return=-672.0)

    def _reset(self) -> np.ndarray:
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)
        self.goal = self.rng.uniform(-1.0, 1.0, size=2)
        return self._obs()

    def _obs(self) -> np.ndarray:
        return np.concatenate([self.pos, self.vel, self.goal])

    def _step(self, a):
        self.pos = self.pos + 0.1 * self.vel
        self.vel = 0.9 * self.vel + 0.1 * a
        reward = -np.linalg.norm(self.pos - self.goal) - 0.01 * float(a @ a)
        return self._obs(), reward


def angle_normalize(x: float) -> float:
    return ((x + np.pi) % (2 * np.pi)) - np.pi


class PendulumSwingup(Env):
    """Torque-limited pendulum; angle 0 is upright.

    Dynamics follow the common gym formulation (uniform rod, velocity clipped
    at 8 rad/s); the episode starts at a uniform angle in [-pi, pi] with
    angular velocity uniform in [-1, 1].
    """

    max_speed = 8.0
    max_torque = 2.0
    dt = 0.05
    g = 10.0
    m = 1.0
    l = 1.0
    spec = EnvSpec(
        "pendulum-swingup",
        obs_dim=3,
        act_dim=1,
        horizon=200,
        min_return=-200 * (np.pi**2 + 0.1 * 8.0**2 + 0.001 * 2.0**2),
    )

    def _reset(self) -> np.ndarray:
        self.phi = float(self.rng.uniform(-np.pi, np.pi))
        self.phi_dot = float(self.rng.uniform(-1.0, 1.0))
        return self._obs()

    def set_state(self, phi: float, phi_dot: float) -> np.ndarray:
        self.phi, self.phi_dot = float(phi), float(phi_dot)
        return self._obs()

    def _obs(self) -> np.ndarray:
        return np.array([np.cos(self.phi), np.sin(self.phi), self.phi_dot])

    def _step(self, a):
        torque = self.max_torque * float(a[0])
        phi, phi_dot = self.phi, self.phi_dot
        cost = angle_normalize(phi) ** 2 + 0.1 * phi_dot**2 + 0.001 * torque**2
        phi_dot = phi_dot + (3 * self.g / (2 * self.l) * np.sin(phi) + 3.0 / (self.m * self.l**2) * torque) * self.dt
        phi_dot = float(np.clip(phi_dot, -self.max_speed, self.max_speed))
        self.phi = phi + phi_dot * self.dt
        self.phi_dot = phi_dot
        return self._obs(), -cost


ENVIRONMENTS: dict[str, type[Env]] = {
    cls.spec.id: cls for cls in (BimodalBandit, PointMassReacher, PendulumSwingup)
}


def make_env(env_id: str, seed: int | np.random.SeedSequence | None = None) -> Env:
    try:
        cls = ENVIRONMENTS[env_id]
    except KeyError:
        raise InvalidConfig(f"unknown environment {env_id!r}; expected one of {', '.join(ENVIRONMENTS)}") from None
    return cls(seed)


def env_spec(env_id: str) -> EnvSpec:
    if env_id not in ENVIRONMENTS:
        raise InvalidConfig(f"unknown environment {env_id!r}; expected one of {', '.join(ENVIRONMENTS)}")
    return ENVIRONMENTS[env_id].spec


def env_reset(env_id: str, seed) -> tuple[Env, np.ndarray]:
    """Create an environment and start its first episode."""
    env = make_env(env_id, seed)
    return env, env.reset()


def env_step(env: Env, action) -> StepResult:
    return env.step(action)
