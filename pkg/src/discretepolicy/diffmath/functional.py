"""Gradient, Hessian-vector product and array-friendly stable nonlinearities."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ContractViolation, NumericError
from . import tensor as T


def backward(loss: T.Tensor, wrt: T.Tensor | Sequence[T.Tensor]):
    """Gradient of a scalar ``loss``.

    Returns one array when ``wrt`` is a single tensor, else a list of arrays.
    Parameters that do not influence the loss get zeros.
    """
    single = isinstance(wrt, T.Tensor)
    inputs = [wrt] if single else list(wrt)
    grads = [g.value for g in T.grad(loss, inputs)]
    return grads[0] if single else grads


def value_and_grad(fn: Callable[[T.Tensor], T.Tensor], at: np.ndarray) -> tuple[float, np.ndarray]:
    theta = T.Tensor(np.asarray(at, dtype=np.float64), requires_grad=True)
    with T.set_grad_enabled(True):
        out = fn(theta)
    if out.size != 1:
        raise ContractViolation(f"function must return a scalar, got shape {out.shape}")
    return float(out.value), backward(out, theta)


def hessian_vector_operator(
    scalar_fn: Callable[[T.Tensor], T.Tensor], at: np.ndarray
) -> Callable[[np.ndarray], np.ndarray]:
    """Return ``v -> H(at) @ v``; the recorded gradient graph is reused across calls."""
    at = np.asarray(at, dtype=np.float64)
    theta = T.Tensor(at, requires_grad=True)
    with T.set_grad_enabled(True):
        out = scalar_fn(theta)
        if out.size != 1:
            raise ContractViolation(f"function must return a scalar, got shape {out.shape}")
        (g,) = T.grad(out, [theta], create_graph=True)

    def apply(v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != at.shape:
            raise ContractViolation(f"point shape {at.shape} and direction shape {v.shape} differ")
        with T.set_grad_enabled(True):
            directional = T.dot(g, T.Tensor(v))
        (hv,) = T.grad(directional, [theta])
        if not np.all(np.isfinite(hv.value)):
            bad = int(np.flatnonzero(~np.isfinite(hv.value))[0])
            raise NumericError(
                f"non-finite Hessian-vector product (first bad coordinate {bad}, f={float(out.value)!r})"
            )
        return hv.value

    return apply


def hessian_vector_product(
    scalar_fn: Callable[[T.Tensor], T.Tensor], at: np.ndarray, v: np.ndarray
) -> np.ndarray:
    """``H(at) @ v`` for the Hessian of ``scalar_fn``, by double backward.

    The gradient is built with a recorded graph, contracted with ``v`` and
    differentiated once more.
    """
    at = np.asarray(at, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if at.shape != v.shape:
        raise ContractViolation(f"point shape {at.shape} and direction shape {v.shape} differ")
    return hessian_vector_operator(scalar_fn, at)(v)


def _apply(fn, x, **kwargs):
    if isinstance(x, T.Tensor):
        return fn(x, **kwargs)
    with T.no_grad():
        return fn(T.Tensor(x), **kwargs).value


def softmax(logits, axis: int = -1):
    """Softmax along ``axis``; shift-invariant and safe for large logits."""
    return _apply(T.softmax, logits, axis=axis)


def log_softmax(logits, axis: int = -1):
    return _apply(T.log_softmax, logits, axis=axis)


def log_sigmoid(x):
    """``log(sigmoid(x))`` computed as ``-softplus(-x)``."""
    return _apply(T.log_sigmoid, x)


def softplus(x):
    """``log(1 + exp(x))`` without overflow."""
    return _apply(T.softplus, x)
