"""Minimal float64 tensor engine with reverse-mode autodiff and gradient checking."""

from .functional import (
    EPS_KL,
    EPS_LN,
    binary_cross_entropy,
    cosine,
    cross_entropy,
    dropout,
    dropout_mask,
    kl_divergence,
    kl_unchecked,
    l2_normalize,
    layer_norm,
    log_softmax,
    logsumexp,
    softmax,
)
from .gradcheck import GradCheckReport, grad_check, relative_error
from .nn import LayerNorm, Linear, Module
from .tensor import (
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    broadcast_to,
    clip,
    concat,
    div,
    embedding,
    exp,
    gelu,
    getitem,
    log,
    matmul,
    mean,
    mul,
    power,
    reshape,
    sigmoid,
    sqrt,
    stack,
    sub,
    tanh,
    transpose,
    tsum,
)

__all__ = [name for name in dir() if not name.startswith("_")]
