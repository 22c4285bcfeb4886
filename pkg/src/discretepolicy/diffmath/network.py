"""Parameter containers, flat parameter vectors and the MLP encoder."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..errors import ContractViolation
from . import tensor as T

ACTIVATIONS = {"tanh": T.tanh, "identity": lambda x: x}


@dataclass
class NetworkParams:
    """Structured view of a network's weights.

    ``layers`` are the encoder layers, each followed by ``activation``.
    ``extras`` hold head-specific blocks (output weights, log-std, ...).
    Entries are ``numpy`` arrays, or tensors when the view was cut out of a
    differentiable flat vector.

    Flattening order: for each layer the weight matrix in row-major order then
    the bias, followed by the extras in insertion order.
    """

    layers: list[tuple[Any, Any]]
    extras: dict[str, Any] = field(default_factory=dict)
    activation: str = "tanh"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ContractViolation(f"unknown activation {self.activation!r}")
        for i, (w, b) in enumerate(self.layers):
            if len(w.shape) != 2 or tuple(b.shape) != (w.shape[0],):
                raise ContractViolation(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[1] != self.layers[i - 1][0].shape[0]:
                raise ContractViolation(
                    f"layer {i} expects {w.shape[1]} inputs but layer {i - 1} emits "
                    f"{self.layers[i - 1][0].shape[0]}"
                )

    @property
    def layout(self) -> "ParamLayout":
        return ParamLayout(
            layer_shapes=tuple(tuple(w.shape) for w, _ in self.layers),
            extra_shapes=tuple((k, tuple(v.shape)) for k, v in self.extras.items()),
            activation=self.activation,
        )

    def flatten(self) -> np.ndarray:
        chunks = []
        for w, b in self.layers:
            chunks += [np.ravel(w), np.ravel(b)]
        chunks += [np.ravel(v) for v in self.extras.values()]
        if not chunks:
            return np.zeros(0)
        return np.concatenate(chunks).astype(np.float64)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flatten())))


@dataclass(frozen=True)
class ParamLayout:
    """Shapes needed to cut a flat parameter vector back into ``NetworkParams``."""

    layer_shapes: tuple[tuple[int, int], ...]
    extra_shapes: tuple[tuple[str, tuple[int, ...]], ...] = ()
    activation: str = "tanh"

    @property
    def size(self) -> int:
        n = sum(o * i + o for o, i in self.layer_shapes)
        return n + sum(int(np.prod(s)) for _, s in self.extra_shapes)

    def unflatten(self, values) -> NetworkParams:
        """Inverse of ``NetworkParams.flatten``; works on arrays and tensors alike."""
        if len(values.shape) != 1 or values.shape[0] != self.size:
            raise ContractViolation(f"expected a flat vector of length {self.size}, got {values.shape}")
        pos = 0

        def take(shape: tuple[int, ...]):
            nonlocal pos
            n = int(np.prod(shape))
            chunk = values[pos : pos + n].reshape(shape)
            pos += n
            return chunk

        layers = []
        for out_dim, in_dim in self.layer_shapes:
            w = take((out_dim, in_dim))
            layers.append((w, take((out_dim,))))
        extras = {name: take(shape) for name, shape in self.extra_shapes}
        return NetworkParams(layers, extras, self.activation)

    def slice_of(self, name: str) -> slice:
        """Position of extra block ``name`` inside the flat vector."""
        pos = sum(o * i + o for o, i in self.layer_shapes)
        for key, shape in self.extra_shapes:
            n = int(np.prod(shape))
            if key == name:
                return slice(pos, pos + n)
            pos += n
        raise KeyError(name)

    def encoder_slice(self) -> slice:
        return slice(0, sum(o * i + o for o, i in self.layer_shapes))


def scaled_uniform(rng: np.random.Generator, out_dim: int, in_dim: int, scale: float = 1.0):
    """Fan-in uniform init: weights and bias drawn from U(-b, b), b = sqrt(1/in_dim)."""
    bound = np.sqrt(1.0 / in_dim)
    w = rng.uniform(-bound, bound, size=(out_dim, in_dim)) * scale
    b = rng.uniform(-bound, bound, size=out_dim) * scale
    return w, b


def init_mlp(rng: np.random.Generator, sizes: list[int] | tuple[int, ...]) -> list[tuple[np.ndarray, np.ndarray]]:
    return [scaled_uniform(rng, o, i) for i, o in zip(sizes[:-1], sizes[1:])]


def encode_numpy(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    """Encoder forward pass on plain arrays, without any graph bookkeeping."""
    act = np.tanh if params.activation == "tanh" else (lambda v: v)
    for w, b in params.layers:
        x = act(x @ w.T + b)
    return x


def mlp_forward(params: NetworkParams, obs):
    """Encoder output ``h(s)``: every layer affine then activation.

    ``obs`` may be a single observation ``(d,)`` or a batch ``(B, d)``. Numpy
    inputs give a numpy result; tensor inputs give a tensor.
    """
    differentiable = isinstance(obs, T.Tensor) or any(
        isinstance(w, T.Tensor) for w, _ in params.layers
    )
    x = T.as_tensor(obs)
    single = x.ndim == 1
    if single:
        x = x.reshape(1, -1)
    if not params.layers:
        return obs
    expected = params.layers[0][0].shape[1]
    if x.ndim != 2 or x.shape[1] != expected:
        raise ContractViolation(f"observation shape {tuple(x.shape)} does not match input size {expected}")
    act = ACTIVATIONS[params.activation]
    with T.set_grad_enabled(T.is_grad_enabled() and differentiable):
        for w, b in params.layers:
            x = act(T.linear(x, w, b))
        if single:
            x = x.reshape(x.shape[1])
    return x if differentiable else x.value


# --- flat vector serialization ---------------------------------------------


def vector_to_bytes(values: np.ndarray) -> bytes:
    """Little-endian u64 element count followed by the f64 values."""
    values = np.ascontiguousarray(values, dtype="<f8").ravel()
    return struct.pack("<Q", values.size) + values.tobytes()


def vector_from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < 8:
        raise ContractViolation("truncated parameter vector header")
    (n,) = struct.unpack_from("<Q", blob)
    if len(blob) != 8 + 8 * n:
        raise ContractViolation(f"header says {n} values but payload holds {(len(blob) - 8) / 8}")
    return np.frombuffer(blob, dtype="<f8", offset=8, count=n).astype(np.float64)
