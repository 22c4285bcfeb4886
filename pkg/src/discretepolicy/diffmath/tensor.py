"""Array-valued reverse-mode differentiation.

Every primitive records its vector-Jacobian product written in terms of other
primitives. With ``create_graph=True`` the backward pass is therefore itself
recorded and can be differentiated again, which is how Hessian-vector
products are obtained.

The operation set is deliberately small: elementwise arithmetic, a handful of
transcendental functions, matrix products, reductions, reshaping and basic
slicing. Values are always float64 ``numpy`` arrays.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import special

from ..errors import ContractViolation


class _GradMode(threading.local):
    enabled = True


_mode = _GradMode()


def is_grad_enabled() -> bool:
    return _mode.enabled


@contextmanager
def set_grad_enabled(enabled: bool) -> Iterator[None]:
    previous = is_grad_enabled()
    _mode.enabled = enabled
    try:
        yield
    finally:
        _mode.enabled = previous


def no_grad():
    """Context manager under which operations record no graph."""
    return set_grad_enabled(False)


class Tensor:
    """A float64 array that optionally remembers how it was computed."""

    __slots__ = ("value", "parents", "vjp", "requires_grad", "op")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, value, requires_grad: bool = False) -> None:
        self.value = np.asarray(value, dtype=np.float64)
        self.parents: tuple[Tensor, ...] = ()
        self.vjp: Callable | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.value!r}{flag})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def __len__(self) -> int:
        return len(self.value)

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    @property
    def mT(self):
        return swap_last(self)


Operand = Tensor | np.ndarray | float | int


def as_tensor(x: Operand) -> Tensor:
    return x if type(x) is Tensor else Tensor(x)


def _node(value: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.value = value
    out.op = op
    if _mode.enabled and any(p.requires_grad for p in parents):
        out.parents = parents
        out.vjp = vjp
        out.requires_grad = True
    else:
        out.parents = ()
        out.vjp = None
        out.requires_grad = False
    return out


# --- shape plumbing -------------------------------------------------------


def sum_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``x`` down to ``shape``, undoing numpy broadcasting."""
    if x.shape == shape:
        return x
    value = x.value
    lead = value.ndim - len(shape)
    if lead > 0:
        value = value.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and value.shape[i] != 1)
    if axes:
        value = value.sum(axis=axes, keepdims=True)
    return _node(value.reshape(shape), (x,), lambda g: (broadcast_to(g, x.shape),), "sum_to")


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    if x.shape == shape:
        return x
    value = np.broadcast_to(x.value, shape)
    return _node(value, (x,), lambda g: (sum_to(g, x.shape),), "broadcast_to")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    value = x.value.reshape(shape)
    return _node(value, (x,), lambda g: (reshape(g, x.shape),), "reshape")


def swap_last(x: Tensor) -> Tensor:
    """Transpose the last two axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ContractViolation("swap_last needs at least two axes")
    return _node(np.swapaxes(x.value, -1, -2), (x,), lambda g: (swap_last(g),), "swap_last")


def getitem(x: Tensor, index) -> Tensor:
    x = as_tensor(x)
    value = x.value[index]
    return _node(np.array(value), (x,), lambda g: (scatter(g, index, x.shape),), "getitem")


def scatter(g: Tensor, index, shape: tuple[int, ...]) -> Tensor:
    """Adjoint of ``getitem``: place ``g`` at ``index`` of a zero array."""
    value = np.zeros(shape)
    if isinstance(index, slice) or (
        isinstance(index, tuple) and all(isinstance(i, (slice, int)) for i in index)
    ):
        value[index] += g.value
    else:
        np.add.at(value, index, g.value)
    return _node(value, (g,), lambda h: (getitem(h, index),), "scatter")


def concatenate(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    value = np.concatenate([p.value for p in parts], axis=axis)
    ax = axis % value.ndim
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def vjp(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * value.ndim
            idx[ax] = slice(int(lo), int(hi))
            out.append(getitem(g, tuple(idx)))
        return tuple(out)

    return _node(value, parts, vjp, "concatenate")


# --- elementwise arithmetic ------------------------------------------------


def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.value + b.value,
        (a, b),
        lambda g: (sum_to(g, a.shape), sum_to(g, b.shape)),
        "add",
    )


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.value - b.value,
        (a, b),
        lambda g: (sum_to(g, a.shape), sum_to(neg(g), b.shape)),
        "sub",
    )


def neg(a: Operand) -> Tensor:
    a = as_tensor(a)
    return _node(-a.value, (a,), lambda g: (neg(g),), "neg")


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.value * b.value,
        (a, b),
        lambda g: (sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)),
        "mul",
    )


def div(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = div(g, b)
        gb = neg(div(mul(ga, a), b))
        return sum_to(ga, a.shape), sum_to(gb, b.shape)

    return _node(a.value / b.value, (a, b), vjp, "div")


def power(x: Operand, exponent: float) -> Tensor:
    x = as_tensor(x)
    p = float(exponent)

    def vjp(g):
        if p == 1.0:
            return (g,)
        return (mul(g, mul(power(x, p - 1.0), p)),)

    return _node(x.value**p, (x,), vjp, "power")


def square(x: Operand) -> Tensor:
    x = as_tensor(x)
    return mul(x, x)


def exp(x: Operand) -> Tensor:
    x = as_tensor(x)
    out = _node(np.exp(x.value), (x,), lambda g: (mul(g, out),), "exp")
    return out


def log(x: Operand) -> Tensor:
    x = as_tensor(x)
    return _node(np.log(x.value), (x,), lambda g: (div(g, x),), "log")


def tanh(x: Operand) -> Tensor:
    x = as_tensor(x)
    out = _node(np.tanh(x.value), (x,), lambda g: (mul(g, sub(1.0, mul(out, out))),), "tanh")
    return out


def sigmoid(x: Operand) -> Tensor:
    x = as_tensor(x)
    out = _node(special.expit(x.value), (x,), lambda g: (mul(g, mul(out, sub(1.0, out))),), "sigmoid")
    return out


def softplus(x: Operand) -> Tensor:
    x = as_tensor(x)
    return _node(np.logaddexp(0.0, x.value), (x,), lambda g: (mul(g, sigmoid(x)),), "softplus")


def log_sigmoid(x: Operand) -> Tensor:
    return neg(softplus(neg(as_tensor(x))))


def lgamma(x: Operand) -> Tensor:
    x = as_tensor(x)
    return _node(special.gammaln(x.value), (x,), lambda g: (mul(g, digamma(x)),), "lgamma")


def digamma(x: Operand) -> Tensor:
    x = as_tensor(x)
    return _node(special.psi(x.value), (x,), lambda g: (mul(g, polygamma(1, x)),), "digamma")


def polygamma(n: int, x: Operand) -> Tensor:
    x = as_tensor(x)
    return _node(
        special.polygamma(n, x.value),
        (x,),
        lambda g: (mul(g, polygamma(n + 1, x)),),
        f"polygamma{n}",
    )


def where(mask: np.ndarray, a: Operand, b: Operand) -> Tensor:
    """Select from ``a`` where ``mask`` holds, else from ``b``; ``mask`` is constant."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    zero = Tensor(0.0)
    return _node(
        np.where(mask, a.value, b.value),
        (a, b),
        lambda g: (sum_to(where(mask, g, zero), a.shape), sum_to(where(mask, zero, g), b.shape)),
        "where",
    )


def minimum(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return where(a.value <= b.value, a, b)


def maximum(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return where(a.value >= b.value, a, b)


def clip(x: Operand, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.value >= lo) & (x.value <= hi)
    return where(inside, x, Tensor(np.clip(x.value, lo, hi)))


# --- linear algebra and reductions -----------------------------------------


def matmul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation(f"matmul needs operands with >= 2 axes, got {a.shape} and {b.shape}")
    try:
        value = np.matmul(a.value, b.value)
    except ValueError as exc:
        raise ContractViolation(f"matmul shape mismatch {a.shape} @ {b.shape}") from exc
    return _node(
        value,
        (a, b),
        lambda g: (
            sum_to(matmul(g, swap_last(b)), a.shape),
            sum_to(matmul(swap_last(a), g), b.shape),
        ),
        "matmul",
    )


def sum_(x: Operand, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    value = x.value.sum(axis=axis, keepdims=keepdims)
    kept = x.value.sum(axis=axis, keepdims=True).shape

    def vjp(g):
        return (broadcast_to(reshape(g, kept), x.shape),)

    return _node(np.asarray(value), (x,), vjp, "sum")


def mean(x: Operand, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    total = sum_(x, axis=axis, keepdims=keepdims)
    count = x.size // max(total.size, 1) if axis is not None else x.size
    return div(total, float(count))


def dot(a: Operand, b: Operand) -> Tensor:
    return sum_(mul(a, b))


def logsumexp(x: Operand, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shift = np.max(x.value, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    out = add(log(sum_(exp(sub(x, shift)), axis=axis, keepdims=True)), shift)
    if not keepdims:
        out = reshape(out, np.squeeze(out.value, axis=axis).shape)
    return out


def log_softmax(x: Operand, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    v = x.value
    shift = np.max(v, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    z = v - shift
    value = z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))

    def vjp(g):
        return (sub(g, mul(exp(out), sum_(g, axis=axis, keepdims=True))),)

    out = _node(value, (x,), vjp, "log_softmax")
    return out


def softmax(x: Operand, axis: int = -1) -> Tensor:
    return exp(log_softmax(x, axis=axis))


def linear(x: Operand, weight: Operand, bias: Operand) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for a batch ``x`` of shape (B, in)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ContractViolation(f"linear: input {x.shape} does not match weight {weight.shape}")

    def vjp(g):
        return (
            matmul(g, weight),
            matmul(swap_last(g), x),
            sum_to(g, bias.shape),
        )

    return _node(x.value @ weight.value.T + bias.value, (x, weight, bias), vjp, "linear")


# --- differentiation --------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    grad_output: Operand | None = None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Vector-Jacobian product of ``output`` with respect to each of ``inputs``.

    Without ``grad_output`` the output must hold a single element. Inputs not
    on the computation path receive zeros. With ``create_graph`` the returned
    tensors carry a graph of their own.
    """
    if grad_output is None:
        if output.size != 1:
            raise ContractViolation(f"gradient root must be scalar, got shape {output.shape}")
        seed = Tensor(np.ones(output.shape))
    else:
        seed = as_tensor(grad_output)
        if seed.shape != output.shape:
            raise ContractViolation(f"grad_output shape {seed.shape} != output shape {output.shape}")

    wanted = {id(t) for t in inputs}
    found: dict[int, Tensor] = {}
    if output.requires_grad:
        with set_grad_enabled(create_graph):
            pending: dict[int, Tensor] = {id(output): seed}
            for node in reversed(_topological_order(output)):
                g = pending.pop(id(node), None)
                if g is None:
                    continue
                if id(node) in wanted:
                    found[id(node)] = g
                if node.vjp is None:
                    continue
                for parent, pg in zip(node.parents, node.vjp(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    pending[key] = add(pending[key], pg) if key in pending else pg
    elif id(output) in wanted:
        found[id(output)] = seed

    return [found.get(id(t), Tensor(np.zeros(t.shape))) for t in inputs]
