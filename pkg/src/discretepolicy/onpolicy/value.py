"""State-value network and its regression fit."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from ..diffmath import tensor as T
from ..diffmath.functional import backward
from ..diffmath.network import NetworkParams, ParamLayout, init_mlp, mlp_forward, scaled_uniform
from ..errors import NumericError
from .optim import AdamState, adam_step


@dataclass(frozen=True)
class ValueNetwork:
    obs_dim: int
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1] if self.hidden else self.obs_dim

    @cached_property
    def layout(self) -> ParamLayout:
        sizes = (self.obs_dim, *self.hidden)
        return ParamLayout(
            layer_shapes=tuple((o, i) for i, o in zip(sizes[:-1], sizes[1:])),
            extra_shapes=(("out_w", (1, self.feature_dim)), ("out_b", (1,))),
            activation=self.activation,
        )

    def init(self, rng: np.random.Generator) -> NetworkParams:
        layers = init_mlp(rng, (self.obs_dim, *self.hidden))
        w, b = scaled_uniform(rng, 1, self.feature_dim)
        return NetworkParams(layers, {"out_w": w, "out_b": b}, self.activation)

    def init_flat(self, rng: np.random.Generator) -> np.ndarray:
        return self.init(rng).flatten()

    def forward(self, params, obs) -> T.Tensor:
        if not isinstance(params, NetworkParams):
            params = self.layout.unflatten(params)
        x = T.as_tensor(obs)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        h = mlp_forward(params, x) if params.layers else x
        out = T.linear(h, params.extras["out_w"], params.extras["out_b"])
        return out.reshape(out.shape[0])

    def predict(self, params, obs) -> np.ndarray:
        with T.no_grad():
            return self.forward(params, obs).value


@dataclass
class ValueFitResult:
    params: np.ndarray
    state: AdamState
    pre_mse: float
    post_mse: float


def value_fit(
    net: ValueNetwork,
    params: np.ndarray,
    obs: np.ndarray,
    returns: np.ndarray,
    epochs: int,
    lr: float,
    rng: np.random.Generator,
    minibatch: int | None = 64,
    state: AdamState | None = None,
) -> ValueFitResult:
    """Minibatch Adam regression of predictions onto ``returns``.

    ``minibatch=None`` uses full-batch steps (one per epoch).
    """
    params = np.asarray(params, dtype=np.float64)
    state = state or AdamState.zeros(params.size)
    n = len(obs)
    size = n if minibatch is None else min(minibatch, n)
    pre = float(np.mean((net.predict(params, obs) - returns) ** 2))
    for _ in range(epochs):
        order = rng.permutation(n) if size < n else np.arange(n)
        for start in range(0, n, size):
            idx = order[start : start + size]
            phi = T.Tensor(params, requires_grad=True)
            err = net.forward(phi, obs[idx]) - returns[idx]
            loss = T.mean(err * err)
            grad = backward(loss, phi)
            if not np.all(np.isfinite(grad)):
                raise NumericError("non-finite value-function gradient")
            params, state = adam_step(params, grad, state, lr)
    post = float(np.mean((net.predict(params, obs) - returns) ** 2))
    return ValueFitResult(params, state, pre, post)
