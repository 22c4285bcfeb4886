"""Minimal dense reverse-mode differentiation for small MLP policies."""

from . import tensor
from .functional import (
    backward,
    hessian_vector_operator,
    hessian_vector_product,
    log_sigmoid,
    log_softmax,
    softmax,
    softplus,
    value_and_grad,
)
from .network import (
    NetworkParams,
    ParamLayout,
    init_mlp,
    mlp_forward,
    scaled_uniform,
    vector_from_bytes,
    vector_to_bytes,
)
from .tensor import Tensor, grad, no_grad

__all__ = [
    "NetworkParams",
    "ParamLayout",
    "Tensor",
    "backward",
    "grad",
    "hessian_vector_operator",
    "hessian_vector_product",
    "init_mlp",
    "log_sigmoid",
    "log_softmax",
    "mlp_forward",
    "no_grad",
    "scaled_uniform",
    "softmax",
    "softplus",
    "tensor",
    "value_and_grad",
    "vector_from_bytes",
    "vector_to_bytes",
]
