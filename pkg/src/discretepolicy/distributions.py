"""Policy heads and their distribution calculus.

Five head kinds share one MLP encoder and differ in the output block:

``gaussian``
    mean = linear(h), a free log-std per action dimension.
``gaussian_tanh``
    as above with the mean squashed by ``tanh``.
``beta``
    ``alpha = softplus(f) + 1``, ``beta = softplus(g) + 1`` on (0, 1), mapped
    to actions by ``a = 2x - 1``.
``discrete``
    K logits per dimension over equally spaced atoms in [-1, 1].
``ordinal``
    the same K logits passed through the stick-breaking transform
    :func:`ordinal_transform` before the softmax.

All action dimensions are independent, so log-probabilities, entropies and
KL divergences are sums of per-dimension terms. Distributions are batched:
parameters carry a leading batch axis ``B`` and every reduction returns one
value per batch row.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from .diffmath import tensor as T
from .diffmath.network import (
    NetworkParams,
    ParamLayout,
    encode_numpy,
    init_mlp,
    mlp_forward,
    scaled_uniform,
)
from .errors import ContractViolation, InvalidConfig, NumericError

HEAD_KINDS = ("gaussian", "gaussian_tanh", "beta", "discrete", "ordinal")
CATEGORICAL_HEADS = ("discrete", "ordinal")
GAUSSIAN_HEADS = ("gaussian", "gaussian_tanh")

CE_EPS = 1e-8
BETA_MAX = 1e4
BETA_MAX_REJECTIONS = 1000
OUTPUT_SCALE = 0.01

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
_LOG2 = np.log(2.0)


@dataclass(frozen=True)
class ActionGrid:
    """K equally spaced atoms ``2j/(K-1) - 1`` covering [-1, 1]."""

    K: int
    atoms: np.ndarray

    @property
    def spacing(self) -> float:
        return 2.0 / (self.K - 1)


def build_grid(K: int) -> ActionGrid:
    if int(K) != K or K < 2:
        raise InvalidConfig(f"number of atoms must be an integer >= 2, got {K!r}")
    K = int(K)
    atoms = 2.0 * np.arange(K) / (K - 1) - 1.0
    atoms[-1] = 1.0
    return ActionGrid(K, atoms)


def ordinal_transform(raw_logits):
    """Stick-breaking logits along the last axis.

    ``L'_i = sum_{j<=i} log s_j + sum_{j>i} log(1 - s_j)`` with
    ``s = sigmoid(raw)``; both logs come from ``log_sigmoid``. Accepts arrays
    (returns an array) or tensors (returns a tensor).
    """
    is_tensor = isinstance(raw_logits, T.Tensor)
    x = T.as_tensor(raw_logits)
    K = x.shape[-1]
    upto = np.triu(np.ones((K, K)))  # upto[j, i] = 1 for j <= i
    after = 1.0 - upto
    shape = x.shape
    flat = x.reshape(-1, K)
    with T.set_grad_enabled(T.is_grad_enabled() and is_tensor):
        out = T.add(
            T.matmul(T.log_sigmoid(flat), T.Tensor(upto)),
            T.matmul(T.log_sigmoid(T.neg(flat)), T.Tensor(after)),
        ).reshape(shape)
    return out if is_tensor else out.value


def ce_target_encoding(k: int, K: int) -> np.ndarray:
    """Cumulative target: ``k`` ones followed by ``K - k`` zeros (1-based ``k``)."""
    if not 1 <= k <= K:
        raise InvalidConfig(f"class index must lie in [1, {K}], got {k}")
    t = np.zeros(K)
    t[:k] = 1.0
    return t


def one_hot(k: int, K: int) -> np.ndarray:
    if not 1 <= k <= K:
        raise InvalidConfig(f"class index must lie in [1, {K}], got {k}")
    e = np.zeros(K)
    e[k - 1] = 1.0
    return e


def stable_cross_entropy(x: np.ndarray, y: np.ndarray, eps: float = CE_EPS) -> float:
    """Per-coordinate Bernoulli cross entropy with probabilities floored at ``eps``.

    ``-sum_i x_i log max(y_i, eps) + (1 - x_i) log max(1 - y_i, eps)``. With
    ``x = t_k`` and ``y = sigmoid(raw)`` this equals ``-ordinal_transform(raw)[k-1]``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    hit = x * np.log(np.maximum(y, eps))
    miss = (1.0 - x) * np.log(np.maximum(1.0 - y, eps))
    return float(-np.sum(hit + miss))


def one_sided_cross_entropy(x: np.ndarray, y: np.ndarray, eps: float = CE_EPS) -> float:
    """``-sum_i x_i log max(y_i, eps)``: only the coordinates where ``x`` is on count.

    Kept for comparison. It cannot rank ``t_{k+1}`` against ``t_{k+2}`` as
    predictions for ``t_k`` (both score zero), which is why the Bernoulli
    form above is the one used.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(-np.sum(x * np.log(np.maximum(y, eps))))


@dataclass(frozen=True)
class PolicyDistribution:
    """Batched factorized action distribution for one head kind.

    Shapes: ``mean`` (B, m) and ``log_std`` (m,) for Gaussian heads; ``alpha``
    and ``beta`` (B, m) for the Beta head; ``logits`` (B, m, K) final logits
    for categorical heads (post-transform for ``ordinal``).
    """

    head: str
    mean: T.Tensor | None = None
    log_std: T.Tensor | None = None
    alpha: T.Tensor | None = None
    beta: T.Tensor | None = None
    logits: T.Tensor | None = None
    grid: ActionGrid | None = None

    @property
    def batch_size(self) -> int:
        return self._main.shape[0]

    @property
    def act_dim(self) -> int:
        return self._main.shape[1]

    @property
    def _main(self) -> T.Tensor:
        if self.head in GAUSSIAN_HEADS:
            return self.mean
        if self.head == "beta":
            return self.alpha
        return self.logits

    def detach(self) -> "PolicyDistribution":
        fields = {
            name: getattr(self, name).detach()
            for name in ("mean", "log_std", "alpha", "beta", "logits")
            if getattr(self, name) is not None
        }
        return replace(self, **fields)

    def probs(self) -> np.ndarray:
        """Per-dimension atom probabilities (B, m, K); categorical heads only."""
        if self.head not in CATEGORICAL_HEADS:
            raise ContractViolation(f"{self.head} head has no atom probabilities")
        with T.no_grad():
            return T.softmax(self.logits.detach()).value

    def check_finite(self) -> None:
        for name in ("mean", "log_std", "alpha", "beta", "logits"):
            t = getattr(self, name)
            if t is None or np.all(np.isfinite(t.value)):
                continue
            bad = np.argwhere(~np.isfinite(t.value))[0]
            dim = int(bad[0]) if t.ndim == 1 else int(bad[1])
            raise NumericError(f"non-finite {name} in policy output", head=self.head, dim=dim)


@dataclass(frozen=True)
class ActionSample:
    """Batched actions.

    ``continuous`` is what the environment receives (inside [-1, 1]).
    ``raw`` is the point the density is evaluated at: the unclipped draw for
    Gaussian heads, the mapped action for Beta, the atom for categorical heads.
    """

    continuous: np.ndarray
    raw: np.ndarray
    behavior_log_prob: np.ndarray
    atom_indices: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.continuous)

    def __getitem__(self, index) -> "ActionSample":
        return ActionSample(
            self.continuous[index],
            self.raw[index],
            self.behavior_log_prob[index],
            None if self.atom_indices is None else self.atom_indices[index],
        )

    @staticmethod
    def stack(samples: list["ActionSample"]) -> "ActionSample":
        return ActionSample(
            np.concatenate([s.continuous for s in samples]),
            np.concatenate([s.raw for s in samples]),
            np.concatenate([s.behavior_log_prob for s in samples]),
            None
            if samples[0].atom_indices is None
            else np.concatenate([s.atom_indices for s in samples]),
        )


@dataclass(frozen=True)
class PolicyNetwork:
    """Architecture of a policy: encoder sizes plus the head block."""

    obs_dim: int
    act_dim: int
    head: str
    bins: int | None = None
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"

    def __post_init__(self) -> None:
        if self.head not in HEAD_KINDS:
            raise InvalidConfig(f"unknown head {self.head!r}; expected one of {', '.join(HEAD_KINDS)}")
        if self.head in CATEGORICAL_HEADS:
            if self.bins is None:
                raise InvalidConfig(f"{self.head} head requires a number of bins")
            build_grid(self.bins)
        elif self.bins is not None:
            raise InvalidConfig(f"{self.head} head does not take a number of bins")
        if self.obs_dim < 1 or self.act_dim < 1:
            raise InvalidConfig("observation and action dimensions must be >= 1")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @cached_property
    def grid(self) -> ActionGrid | None:
        return build_grid(self.bins) if self.head in CATEGORICAL_HEADS else None

    @property
    def n_outputs(self) -> int:
        if self.head in GAUSSIAN_HEADS:
            return self.act_dim
        if self.head == "beta":
            return 2 * self.act_dim
        return self.act_dim * self.bins

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1] if self.hidden else self.obs_dim

    @cached_property
    def layout(self) -> ParamLayout:
        sizes = (self.obs_dim, *self.hidden)
        extras = [("head_w", (self.n_outputs, self.feature_dim)), ("head_b", (self.n_outputs,))]
        if self.head in GAUSSIAN_HEADS:
            extras.append(("log_std", (self.act_dim,)))
        return ParamLayout(
            layer_shapes=tuple((o, i) for i, o in zip(sizes[:-1], sizes[1:])),
            extra_shapes=tuple(extras),
            activation=self.activation,
        )

    def init(self, rng: np.random.Generator) -> NetworkParams:
        layers = init_mlp(rng, (self.obs_dim, *self.hidden))
        head_w, head_b = scaled_uniform(rng, self.n_outputs, self.feature_dim, scale=OUTPUT_SCALE)
        extras = {"head_w": head_w, "head_b": head_b}
        if self.head in GAUSSIAN_HEADS:
            extras["log_std"] = np.zeros(self.act_dim)
        return NetworkParams(layers, extras, self.activation)

    def init_flat(self, rng: np.random.Generator) -> np.ndarray:
        return self.init(rng).flatten()

    def forward(self, params, obs) -> PolicyDistribution:
        """Distribution over actions for a batch of observations.

        ``params`` may be ``NetworkParams``, a flat array or a flat tensor.
        """
        if not isinstance(params, NetworkParams):
            params = self.layout.unflatten(params)
        m = self.act_dim
        plain = not T.is_grad_enabled() or not any(
            isinstance(v, T.Tensor) for v in params.extras.values()
        )
        if plain and not isinstance(obs, T.Tensor):
            x = np.asarray(obs, dtype=np.float64)
            x = x.reshape(1, -1) if x.ndim == 1 else x
            plain_params = _values(params)
            h = encode_numpy(plain_params, x)
            extras = plain_params.extras
            out = T.Tensor(h @ extras["head_w"].T + extras["head_b"])
            params = NetworkParams([], {k: T.Tensor(v) for k, v in extras.items()}, params.activation)
        else:
            x = T.as_tensor(obs)
            if x.ndim == 1:
                x = x.reshape(1, -1)
            h = mlp_forward(params, x) if params.layers else x
            out = T.linear(h, params.extras["head_w"], params.extras["head_b"])
        self._check_output(out.value)
        if self.head == "gaussian":
            dist = PolicyDistribution("gaussian", mean=out, log_std=T.as_tensor(params.extras["log_std"]))
        elif self.head == "gaussian_tanh":
            dist = PolicyDistribution(
                "gaussian_tanh", mean=T.tanh(out), log_std=T.as_tensor(params.extras["log_std"])
            )
        elif self.head == "beta":
            alpha = T.minimum(T.softplus(out[:, :m]) + 1.0, BETA_MAX)
            beta = T.minimum(T.softplus(out[:, m:]) + 1.0, BETA_MAX)
            dist = PolicyDistribution("beta", alpha=alpha, beta=beta)
        else:
            logits = out.reshape(out.shape[0], m, self.bins)
            if self.head == "ordinal":
                logits = ordinal_transform(logits)
            dist = PolicyDistribution(self.head, logits=logits, grid=self.grid)
        dist.check_finite()
        return dist


    def _check_output(self, out: np.ndarray) -> None:
        # clamps downstream would hide a NaN, so check before the head transform
        if np.all(np.isfinite(out)):
            return
        col = int(np.argwhere(~np.isfinite(out))[0][1])
        if self.head in CATEGORICAL_HEADS:
            dim = col // self.bins
        else:
            dim = col % self.act_dim
        raise NumericError("non-finite policy output", head=self.head, dim=dim)


def _values(params: NetworkParams) -> NetworkParams:
    """Same parameters with any tensors replaced by their arrays."""
    if not any(isinstance(w, T.Tensor) for w, _ in params.layers) and not any(
        isinstance(v, T.Tensor) for v in params.extras.values()
    ):
        return params
    val = lambda t: t.value if isinstance(t, T.Tensor) else t  # noqa: E731
    return NetworkParams(
        [(val(w), val(b)) for w, b in params.layers],
        {k: val(v) for k, v in params.extras.items()},
        params.activation,
    )


def head_forward(net: PolicyNetwork, params, obs) -> PolicyDistribution:
    return net.forward(params, obs)


# --- sampling ----------------------------------------------------------------


def _categorical_draw(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    # u in (0, 1]; first index whose CDF reaches u, so a tie goes to the lower index
    u = 1.0 - rng.random(probs.shape[:-1])
    cdf = np.cumsum(probs, axis=-1)
    idx = (cdf < u[..., None]).sum(axis=-1)
    # rounding can leave the CDF short of u; fall back to the last atom with mass
    short = idx >= probs.shape[-1]
    if short.any():
        last_positive = probs.shape[-1] - 1 - np.argmax(probs[..., ::-1] > 0, axis=-1)
        idx = np.where(short, last_positive, idx)
    return idx


def _gamma_draw(rng: np.random.Generator, shape: np.ndarray) -> np.ndarray:
    """Marsaglia-Tsang rejection sampler for Gamma(shape, 1) with shape >= 1."""
    shape = np.asarray(shape, dtype=np.float64)
    if np.any(shape < 1.0):
        raise ContractViolation("gamma sampler requires shape >= 1")
    flat = shape.ravel()
    d = flat - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    out = np.empty_like(flat)
    pending = np.arange(flat.size)
    for _ in range(BETA_MAX_REJECTIONS):
        if pending.size == 0:
            break
        z = rng.standard_normal(pending.size)
        u = rng.random(pending.size)
        v = (1.0 + c[pending] * z) ** 3
        with np.errstate(invalid="ignore", divide="ignore"):
            accept = (v > 0) & (
                np.log(u) < 0.5 * z * z + d[pending] - d[pending] * v + d[pending] * np.log(v)
            )
        out[pending[accept]] = d[pending[accept]] * v[accept]
        pending = pending[~accept]
    else:
        if pending.size:
            raise NumericError(f"beta sampling did not accept within {BETA_MAX_REJECTIONS} proposals", head="beta")
    return out.reshape(shape.shape)


def sample(dist: PolicyDistribution, rng: np.random.Generator) -> ActionSample:
    """One action per batch row, with its log-probability under ``dist``."""
    if dist.head in CATEGORICAL_HEADS:
        with T.no_grad():
            logp = T.log_softmax(dist.logits.detach()).value
        idx = _categorical_draw(rng, np.exp(logp))
        atoms = dist.grid.atoms[idx]
        rows, dims = np.indices(idx.shape, sparse=True)
        lp = logp[rows, dims, idx].sum(axis=-1)
        if not np.all(np.isfinite(lp)):
            raise NumericError("sampled action has non-finite log-probability", head=dist.head)
        return ActionSample(atoms, atoms, lp, idx)
    if dist.head in GAUSSIAN_HEADS:
        mean = dist.mean.value
        std = np.exp(np.broadcast_to(dist.log_std.value, mean.shape))
        raw = mean + std * rng.standard_normal(mean.shape)
        action = ActionSample(np.clip(raw, -1.0, 1.0), raw, np.zeros(len(raw)))
    elif dist.head == "beta":
        ga = _gamma_draw(rng, dist.alpha.value)
        gb = _gamma_draw(rng, dist.beta.value)
        with np.errstate(invalid="ignore"):
            x = ga / (ga + gb)
        a = 2.0 * x - 1.0
        action = ActionSample(a, a, np.zeros(len(a)))
    else:
        raise ContractViolation(f"unknown head {dist.head!r}")
    with T.no_grad():
        lp = log_prob(dist.detach(), action).value
    if not np.all(np.isfinite(lp)):
        raise NumericError("sampled action has non-finite log-probability", head=dist.head)
    return replace(action, behavior_log_prob=lp)


# --- densities ---------------------------------------------------------------


_EYES: dict[int, np.ndarray] = {}


def _atom_mask(dist: PolicyDistribution, action: ActionSample) -> np.ndarray:
    if action.atom_indices is None:
        raise ContractViolation(f"{dist.head} head needs atom indices")
    idx = np.asarray(action.atom_indices)
    K = dist.logits.shape[-1]
    if idx.shape != dist.logits.shape[:-1]:
        raise ContractViolation(f"atom indices shape {idx.shape} != {dist.logits.shape[:-1]}")
    if np.any(idx < 0) or np.any(idx >= K):
        raise ContractViolation(f"atom index out of range [0, {K})")
    eye = _EYES.get(K)
    if eye is None:
        eye = _EYES[K] = np.eye(K)
    return eye[idx]


def _beta_log_norm(alpha: T.Tensor, beta: T.Tensor) -> T.Tensor:
    return T.lgamma(alpha) + T.lgamma(beta) - T.lgamma(alpha + beta)


def log_prob_per_dim(dist: PolicyDistribution, action: ActionSample) -> T.Tensor:
    """Per-dimension log density or mass, shape (B, m)."""
    if dist.head in CATEGORICAL_HEADS:
        mask = _atom_mask(dist, action)
        return T.sum_(T.log_softmax(dist.logits) * mask, axis=-1)
    if dist.head in GAUSSIAN_HEADS:
        z = (T.Tensor(action.raw) - dist.mean) / T.exp(dist.log_std)
        return -0.5 * z * z - dist.log_std - _HALF_LOG_2PI
    if dist.head == "beta":
        x = (np.asarray(action.raw) + 1.0) / 2.0
        with np.errstate(divide="ignore"):
            log_x, log_1mx = np.log(x), np.log1p(-x)
        return (
            (dist.alpha - 1.0) * log_x
            + (dist.beta - 1.0) * log_1mx
            - _beta_log_norm(dist.alpha, dist.beta)
            - _LOG2
        )
    raise ContractViolation(f"unknown head {dist.head!r}")


def log_prob(dist: PolicyDistribution, action: ActionSample) -> T.Tensor:
    """Joint log-probability, the sum over action dimensions; shape (B,)."""
    return T.sum_(log_prob_per_dim(dist, action), axis=-1)


def entropy(dist: PolicyDistribution) -> T.Tensor:
    if dist.head in CATEGORICAL_HEADS:
        logp = T.log_softmax(dist.logits)
        per_dim = -T.sum_(T.exp(logp) * logp, axis=-1)
    elif dist.head in GAUSSIAN_HEADS:
        per_dim = T.broadcast_to(dist.log_std + (0.5 + _HALF_LOG_2PI), dist.mean.shape)
    elif dist.head == "beta":
        a, b = dist.alpha, dist.beta
        per_dim = (
            _beta_log_norm(a, b)
            - (a - 1.0) * T.digamma(a)
            - (b - 1.0) * T.digamma(b)
            + (a + b - 2.0) * T.digamma(a + b)
            + _LOG2
        )
    else:
        raise ContractViolation(f"unknown head {dist.head!r}")
    return T.sum_(per_dim, axis=-1)


def kl(old: PolicyDistribution, new: PolicyDistribution) -> T.Tensor:
    """``KL(old || new)`` per batch row, summed over action dimensions."""
    if old.head != new.head:
        raise ContractViolation(f"KL between different heads {old.head!r} and {new.head!r}")
    if old._main.shape != new._main.shape:
        raise ContractViolation(f"KL between shapes {old._main.shape} and {new._main.shape}")
    if old.head in CATEGORICAL_HEADS:
        lp_old = T.log_softmax(old.logits)
        lp_new = T.log_softmax(new.logits)
        per_dim = T.sum_(T.exp(lp_old) * (lp_old - lp_new), axis=-1)
    elif old.head in GAUSSIAN_HEADS:
        var_old = T.exp(2.0 * old.log_std)
        var_new = T.exp(2.0 * new.log_std)
        diff = old.mean - new.mean
        per_dim = new.log_std - old.log_std + (var_old + diff * diff) / (2.0 * var_new) - 0.5
    else:
        a1, b1, a2, b2 = old.alpha, old.beta, new.alpha, new.beta
        per_dim = (
            _beta_log_norm(a2, b2)
            - _beta_log_norm(a1, b1)
            + (a1 - a2) * T.digamma(a1)
            + (b1 - b2) * T.digamma(b1)
            + (a2 - a1 + b2 - b1) * T.digamma(a1 + b1)
        )
    return T.sum_(per_dim, axis=-1)


def density_on_grid(dist: PolicyDistribution, points: np.ndarray, dim: int = 0) -> np.ndarray:
    """Marginal density of dimension ``dim`` for the first batch row at ``points``.

    Categorical heads spread each atom's mass uniformly over its nearest-atom
    cell, so the result integrates to one over [-1, 1].
    """
    points = np.asarray(points, dtype=np.float64)
    if dist.head in CATEGORICAL_HEADS:
        p = dist.probs()[0, dim]
        grid = dist.grid
        cell = np.clip(np.floor((points + 1.0) / grid.spacing + 0.5).astype(int), 0, grid.K - 1)
        width = np.where((cell == 0) | (cell == grid.K - 1), grid.spacing / 2.0, grid.spacing)
        return p[cell] / width
    if dist.head in GAUSSIAN_HEADS:
        mu = dist.mean.value[0, dim]
        sd = float(np.exp(np.broadcast_to(dist.log_std.value, dist.mean.shape)[0, dim]))
        return np.exp(-0.5 * ((points - mu) / sd) ** 2) / (sd * np.sqrt(2.0 * np.pi))
    if dist.head == "beta":
        from scipy import stats

        a, b = dist.alpha.value[0, dim], dist.beta.value[0, dim]
        return stats.beta.pdf((points + 1.0) / 2.0, a, b) / 2.0
    raise ContractViolation(f"unknown head {dist.head!r}")
