"""First-order optimizer state and the conjugate gradient solver."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from ..errors import NumericError


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(
    params: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam descent step; returns new params and state."""
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


class CGResult(NamedTuple):
    x: np.ndarray
    residual_norm: float
    iterations: int


def conjugate_gradient(
    apply_A: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    iters: int = 10,
    tol: float = 1e-10,
    curvature_tol: float = 1e-12,
) -> CGResult:
    """Solve ``A x = b`` for symmetric positive-definite ``A`` given as a matvec.

    Stops once ``||A x - b|| <= tol * ||b||`` or after ``iters`` iterations;
    hitting the cap is not an error. Non-positive curvature along a search
    direction raises ``NumericError``.
    """
    b = np.asarray(b, dtype=np.float64)
    if not np.all(np.isfinite(b)):
        raise NumericError("conjugate gradient got a non-finite right-hand side")
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    target = tol * np.sqrt(rr)
    done = 0
    for _ in range(iters):
        if np.sqrt(rr) <= target or rr == 0.0:
            break
        Ap = apply_A(p)
        curvature = float(p @ Ap)
        if not np.isfinite(curvature):
            raise NumericError("conjugate gradient produced a non-finite curvature")
        if curvature <= curvature_tol * float(p @ p):
            raise NumericError(f"conjugate gradient hit non-positive curvature {curvature:.3e}")
        step = rr / curvature
        x = x + step * p
        r = r - step * Ap
        rr_new = float(r @ r)
        if not np.isfinite(rr_new):
            raise NumericError("conjugate gradient residual became non-finite")
        p = r + (rr_new / rr) * p
        rr = rr_new
        done += 1
    return CGResult(x, float(np.sqrt(rr)), done)
