"""Intention-emotion guided fusion: knowledge selection, guided attention, score adjustment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import MASK_VALUE, attention_weights, merge_heads, split_heads
from .errors import ConfigError, DimensionError
from .numcore import (
    LayerNorm,
    Linear,
    Module,
    Tensor,
    broadcast_to,
    concat,
    cosine,
    cross_entropy,
    gelu,
    matmul,
    sigmoid,
    softmax,
)
from .numcore.nn import zeros_param

DEFAULT_ETA = 0.1
DEFAULT_N_REFINE = 3
DEFAULT_SD_PROB = 0.1


# ------------------------------------------------------------------------- EIKS
def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class KnowledgeSelector(Module):
    """Emotion classifier over knowledge rows plus the gate that blends refined knowledge back in."""

    def __init__(self, rng: np.random.Generator, d: int, n_emotions: int = 7,
                 eta: float = DEFAULT_ETA, n_refine: int = DEFAULT_N_REFINE):
        if eta <= 0 or n_refine < 1:
            raise ConfigError("EIKS needs eta > 0 and n_refine >= 1")
        self.classifier = Linear(rng, d, n_emotions)
        self.gate = Linear(rng, 2 * d, d)
        self.eta = eta
        self.n_refine = n_refine

    def emotion_classify(self, f_t_cls: Tensor, e_t) -> tuple[Tensor, Tensor]:
        """Logits and per-sample cross entropy against the lexicon distribution."""
        logits = self.classifier(f_t_cls)
        return logits, cross_entropy(logits, e_t)

    def relation_losses(self, knowledge: np.ndarray, e_t) -> np.ndarray:
        """Emotion-classification loss of every knowledge row, shape (..., n_relations)."""
        w, b = self.classifier.weight.data, self.classifier.bias.data
        logits = knowledge @ w + b
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        e = np.asarray(e_t, dtype=np.float64)[..., None, :]
        return -(e * logp).sum(axis=-1)

    def select_irrelevant(self, knowledge, e_t) -> np.ndarray:
        """Index of the relation whose knowledge the emotion classifier fits worst."""
        data = knowledge.data if isinstance(knowledge, Tensor) else np.asarray(knowledge)
        return np.argmax(self.relation_losses(data, e_t), axis=-1)

    def knowledge_adjust(self, knowledge: Tensor, e_t, eta: float | None = None,
                         n_refine: int | None = None) -> Tensor:
        """Shift every knowledge row by a descent step on the worst row's emotion loss.

        ``knowledge`` is (B, R, d). Each refinement round re-selects the worst row
        of the current (shifted) knowledge, takes the gradient of its emotion loss,
        and sets the shift to ``-eta`` times the running mean of those gradients.
        For a linear softmax classifier the gradient is ``(softmax(xW+b) - e) Wᵀ``,
        so the shift is built from ordinary tape ops and stays differentiable.
        """
        eta = self.eta if eta is None else eta
        n_refine = self.n_refine if n_refine is None else n_refine
        e = np.asarray(e_t, dtype=np.float64)
        bsz, _, d = knowledge.shape
        if eta == 0.0:
            return knowledge
        rows = np.arange(bsz)
        w_t = self.classifier.weight.T
        grad_sum = None
        delta = None
        for k in range(n_refine):
            current = knowledge if delta is None else knowledge + delta.reshape(bsz, 1, d)
            r_star = self.select_irrelevant(current.data, e)
            row = current[rows, r_star]
            resid = softmax(self.classifier(row)) - e
            g = matmul(resid, w_t)
            grad_sum = g if grad_sum is None else grad_sum + g
            delta = grad_sum * (-eta / (k + 1))
        return knowledge + delta.reshape(bsz, 1, d)

    def gate_fuse(self, knowledge: Tensor, enhanced: Tensor) -> Tensor:
        if knowledge.shape != enhanced.shape:
            raise DimensionError(f"gate inputs differ in shape: {knowledge.shape} vs {enhanced.shape}")
        w = sigmoid(self.gate(concat([knowledge, enhanced], axis=-1)))
        return w * enhanced + (1.0 - w) * knowledge

    def __call__(self, knowledge: Tensor, e_t) -> Tensor:
        return self.gate_fuse(knowledge, self.knowledge_adjust(knowledge, e_t))


# ------------------------------------------------------------------------- IEGA
@dataclass
class FusionTrace:
    z_fuse: Tensor
    attn_visual: Tensor | None = None
    attn_text: Tensor | None = None


class FusionOutputHead(Module):
    """LN(F_t + SD(E_fuse)) followed by a residual two-layer MLP."""

    def __init__(self, rng: np.random.Generator, d: int):
        self.ln = LayerNorm(d)
        self.fc1 = Linear(rng, d, 2 * d)
        self.fc2 = Linear(rng, 2 * d, d)

    def __call__(self, f_t: Tensor, e_fuse: Tensor, sd_mask: np.ndarray | None) -> Tensor:
        branch = e_fuse if sd_mask is None else e_fuse * sd_mask
        h = self.ln(f_t + branch)
        return h + self.fc2(gelu(self.fc1(h)))


class GuidedAttentionFusion(Module):
    """Intention-emotion queries distil the sticker, then text attends to the distilled values."""

    def __init__(self, rng: np.random.Generator, d: int, n_heads: int):
        if d % n_heads:
            raise ConfigError(f"d_model={d} is not divisible by n_heads={n_heads}")
        self.q_ei = Linear(rng, d, d, bias=False)
        self.k_v = Linear(rng, d, d, bias=False)
        self.v_v = Linear(rng, d, d, bias=False)
        self.q_t = Linear(rng, d, d, bias=False)
        self.out = FusionOutputHead(rng, d)
        self.n_heads = n_heads

    def __call__(self, f_v: Tensor, f_t: Tensor, e_it: Tensor, sd_mask=None) -> FusionTrace:
        """Shapes broadcast over leading axes: f_v (..., Lv, d), f_t (..., Lt, d), e_it (..., Le, d)."""
        h = self.n_heads
        q_ei = split_heads(self.q_ei(e_it), h)
        k_v = split_heads(self.k_v(f_v), h)
        v_v = split_heads(self.v_v(f_v), h)
        attn_visual = attention_weights(q_ei, k_v)
        v_eiv = matmul(attn_visual, v_v)
        q_t = split_heads(self.q_t(f_t), h)
        attn_text = attention_weights(q_t, q_ei)
        e_fuse = merge_heads(matmul(attn_text, v_eiv))
        return FusionTrace(self.out(f_t, e_fuse, sd_mask), attn_visual, attn_text)


class PlainAttentionFusion(Module):
    """Text rows of self-attention over the concatenated text and sticker tokens."""

    def __init__(self, rng: np.random.Generator, d: int, n_heads: int):
        self.q = Linear(rng, d, d, bias=False)
        self.k = Linear(rng, d, d, bias=False)
        self.v = Linear(rng, d, d, bias=False)
        self.out = FusionOutputHead(rng, d)
        self.n_heads = n_heads

    def __call__(self, f_v: Tensor, f_t_query: Tensor, f_t_all: Tensor, text_valid: np.ndarray,
                 sd_mask=None) -> FusionTrace:
        """``f_t_all`` (B, 1, Lt, d) and ``f_v`` (B, N, Lv, d); queries are ``f_t_query`` rows."""
        bsz, n = f_v.shape[0], f_v.shape[1]
        lt = f_t_all.shape[-2]
        tokens = concat([broadcast_to(f_t_all, (bsz, n, lt, f_t_all.shape[-1])), f_v], axis=2)
        valid = np.concatenate([text_valid, np.ones((bsz, f_v.shape[2]), dtype=bool)], axis=1)
        mask = np.where(valid, 0.0, MASK_VALUE)[:, None, None, None, :]
        h = self.n_heads
        attn = attention_weights(split_heads(self.q(f_t_query), h), split_heads(self.k(tokens), h), mask)
        e_fuse = merge_heads(matmul(attn, split_heads(self.v(tokens), h)))
        return FusionTrace(self.out(f_t_query, e_fuse, sd_mask), None, attn)


def iega_fuse(fusion: GuidedAttentionFusion, f_v: Tensor, f_t: Tensor, e_it: Tensor, sd_mask=None) -> Tensor:
    return fusion(f_v, f_t, e_it, sd_mask).z_fuse


# ------------------------------------------------------------------------- SAMM
def predict_pvl(head: Linear, z_fuse: Tensor) -> Tensor:
    """Match probability from the CLS row of the fused sequence."""
    return sigmoid(head(z_fuse[..., 0, :])).reshape(z_fuse.shape[:-2])


def normalized_cosine(a: Tensor, b: Tensor) -> Tensor:
    return (cosine(a, b) + 1.0) * 0.5


def samm_similarities(e_t: Tensor, e_v: Tensor, i_t_pooled: Tensor, i_v: Tensor) -> tuple[Tensor, Tensor]:
    return normalized_cosine(e_t, e_v), normalized_cosine(i_t_pooled, i_v)


def samm_combine(s_emo, s_int, alpha):
    return alpha * s_emo + (1.0 - alpha) * s_int


def final_score(p_vl, s_ei, beta):
    return beta * p_vl + (1.0 - beta) * s_ei


class ScoreMixer(Module):
    """Learnable convex weights alpha = sigmoid(a_raw), beta = sigmoid(b_raw), both 0.5 at init."""

    def __init__(self):
        self.a_raw = zeros_param(())
        self.b_raw = zeros_param(())

    @property
    def alpha(self) -> Tensor:
        return sigmoid(self.a_raw)

    @property
    def beta(self) -> Tensor:
        return sigmoid(self.b_raw)
