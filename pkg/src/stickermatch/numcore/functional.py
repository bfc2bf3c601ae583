"""Fused differentiable primitives built on :mod:`stickermatch.numcore.tensor`."""

from __future__ import annotations

import numpy as np

from ..errors import DegenerateInputError, ValidationError
from .tensor import DTYPE, Tensor, _make, as_tensor, mul, tsum

EPS_KL = 1e-8
EPS_LN = 1e-5
EPS_NORM = 1e-12


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = EPS_LN) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then apply ``gain`` and ``bias``."""
    x = as_tensor(x)
    n = x.shape[-1]
    if n < 2:
        raise ValidationError(f"layer_norm needs a last axis of length >= 2, got {n}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gx = g * gain.data if gain is not None else g
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if gain is not None:
            grads.append((g * xhat).reshape(-1, n).sum(axis=0).reshape(gain.shape) if gain.requires_grad else None)
        if bias is not None:
            grads.append(g.reshape(-1, n).sum(axis=0).reshape(bias.shape) if bias.requires_grad else None)
        return grads

    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    parents = (x,) + tuple(p for p in (gain, bias) if p is not None)
    return _make(out, parents, bw, "layer_norm")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = EPS_NORM) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    if np.any(norm <= eps):
        raise DegenerateInputError("cannot normalise a (near-)zero vector")
    out = xd / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _make(out, (x,), bw, "l2_normalize")


def cosine(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Cosine similarity along ``axis``; raises on zero vectors."""
    return tsum(mul(l2_normalize(a, axis), l2_normalize(b, axis)), axis=axis)


def _check_distribution(p: np.ndarray, name: str, tol: float = 1e-9) -> None:
    if np.any(p < 0):
        raise ValidationError(f"{name} has negative entries")
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > tol):
        raise ValidationError(f"{name} does not sum to 1 (got {sums!r})")


def kl_divergence(p: Tensor, q: Tensor, eps: float = EPS_KL) -> Tensor:
    """KL(p || q) along the last axis; q (and p inside its log) are floored at ``eps``.

    Leading axes are kept, so a batch of distributions gives a batch of divergences.
    """
    p, q = as_tensor(p), as_tensor(q)
    _check_distribution(p.data, "p")
    _check_distribution(q.data, "q")
    return kl_unchecked(p, q, eps)


def kl_unchecked(p: Tensor, q: Tensor, eps: float = EPS_KL) -> Tensor:
    """:func:`kl_divergence` without the normalisation check, for softmax outputs."""
    pd, qd = p.data, q.data
    pf = np.maximum(pd, eps)
    qf = np.maximum(qd, eps)
    out = (pd * (np.log(pf) - np.log(qf))).sum(axis=-1)

    def bw(g):
        g = np.expand_dims(g, -1)
        gp = g * (np.log(pf) - np.log(qf) + np.where(pd > eps, 1.0, 0.0)) if p.requires_grad else None
        gq = -g * pd / qf * (qd > eps) if q.requires_grad else None
        return gp, gq

    return _make(out, (p, q), bw, "kl")


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Soft-target cross entropy ``-sum(target * log_softmax(logits))`` per row."""
    target = np.asarray(target, dtype=DTYPE)
    return -tsum(log_softmax(logits, -1) * target, axis=-1)


def binary_cross_entropy(p: Tensor, y: np.ndarray, eps: float = 1e-7) -> Tensor:
    """Mean BCE; scores are clamped into ``[eps, 1-eps]`` before the logs."""
    p = as_tensor(p)
    y = np.asarray(y, dtype=DTYPE)
    pd = p.data
    pc = np.clip(pd, eps, 1.0 - eps)
    inside = (pd > eps) & (pd < 1.0 - eps)
    n = pd.size
    out = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).mean()

    def bw(g):
        return (g * inside * (pc - y) / (pc * (1.0 - pc)) / n,)

    return _make(np.asarray(out), (p,), bw, "bce")


def dropout_mask(shape, rate: float, rng) -> np.ndarray:
    """Inverted-dropout keep mask: Bernoulli(1-rate) scaled by 1/(1-rate).

    ``rng`` is a seed or a :class:`numpy.random.Generator`; the mask is a pure
    function of it.
    """
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape, dtype=DTYPE)
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    keep = gen.random(shape) >= rate
    return keep.astype(DTYPE) / (1.0 - rate)


def dropout(x: Tensor, rate: float, rng) -> Tensor:
    if rate == 0.0 or rng is None:
        return x
    return mul(x, dropout_mask(x.shape, rate, rng))


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    s = np.exp(x.data - m).sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    sm = np.exp(x.data - m) / s

    def bw(g):
        return (np.expand_dims(g, axis) * sm,)

    return _make(out, (x,), bw, "logsumexp")


__all__ = [
    "EPS_KL",
    "EPS_LN",
    "softmax",
    "log_softmax",
    "layer_norm",
    "l2_normalize",
    "cosine",
    "kl_divergence",
    "kl_unchecked",
    "cross_entropy",
    "binary_cross_entropy",
    "dropout_mask",
    "dropout",
    "logsumexp",
]
