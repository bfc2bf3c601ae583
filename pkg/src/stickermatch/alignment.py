"""Inter- and intra-modality contrastive alignment losses.

All losses take batched tensors whose first axis is the batch (size K) and
return scalar tensors averaged over that axis.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from .errors import ConfigError, ValidationError
from .numcore import (
    Linear,
    Module,
    Tensor,
    concat,
    dropout,
    kl_divergence,
    l2_normalize,
    log_softmax,
    matmul,
    softmax,
)

DEFAULT_TAU = 0.07
DEFAULT_VIEW_DROPOUT = 0.1


@dataclass
class AlignmentWeights:
    tau: float = DEFAULT_TAU
    w_e: float = 0.5
    w_i: float = 0.5
    w_e_t: float = 0.5
    w_e_v: float = 0.5
    w_i_t: float = 0.5
    w_i_v: float = 0.5

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        for k, v in asdict(self).items():
            if k != "tau" and v < 0:
                raise ConfigError(f"weight {k} must be nonnegative, got {v}")

    def to_dict(self) -> dict:
        return asdict(self)


def _check_batch(x: Tensor, name: str) -> int:
    if x.ndim < 1 or x.shape[0] == 0:
        raise ValidationError(f"{name} must hold at least one sample")
    return x.shape[0]


def _diagonal_nce(anchors: Tensor, others: Tensor, tau: float) -> Tensor:
    """-mean_i log softmax_j(anchor_i . other_j / tau)[i]."""
    k = anchors.shape[0]
    logits = matmul(anchors, others.T) * (1.0 / tau)
    lsm = log_softmax(logits, axis=-1)
    return -(lsm * np.eye(k)).sum() * (1.0 / k)


def info_nce_i2t(v_pos: Tensor, t: Tensor, tau: float = DEFAULT_TAU) -> Tensor:
    """Image-to-text InfoNCE: each positive sticker against all dialogues in the batch."""
    _check_batch(v_pos, "v_pos")
    _check_batch(t, "t")
    return _diagonal_nce(v_pos, t, tau)


def info_nce_t2i(t: Tensor, v_pos: Tensor, v_neg: Tensor, tau: float = DEFAULT_TAU) -> Tensor:
    """Text-to-image InfoNCE against each dialogue's own negative stickers.

    ``v_neg`` has shape (K, N_neg, d). The denominator holds the positive term
    plus the N_neg negative terms.
    """
    k = _check_batch(t, "t")
    if v_neg.ndim != 3 or v_neg.shape[1] == 0:
        raise ValidationError("every sample needs a nonempty negative sticker set")
    pos = (t * v_pos).sum(axis=-1).reshape(k, 1)
    neg = matmul(v_neg, t.reshape(k, -1, 1)).reshape(k, v_neg.shape[1])
    logits = concat([pos, neg], axis=1) * (1.0 / tau)
    return -log_softmax(logits, axis=-1)[:, 0].mean()


def emotion_align_loss(e_v_pos: Tensor, e_t: Tensor) -> Tensor:
    """Batch-mean KL(softmax(E_v_pos) || softmax(E_t))."""
    return kl_divergence(softmax(e_v_pos, -1), softmax(e_t, -1)).mean()


def symmetric_nce(a: Tensor, b: Tensor, tau: float) -> Tensor:
    return (_diagonal_nce(a, b, tau) + _diagonal_nce(b, a, tau)) * 0.5


def intention_align_loss(i_v: Tensor, i_t_pooled: Tensor, tau: float = DEFAULT_TAU) -> Tensor:
    """Symmetric in-batch InfoNCE between visual and (relation-pooled) textual intentions."""
    _check_batch(i_v, "i_v")
    _check_batch(i_t_pooled, "i_t_pooled")
    return symmetric_nce(l2_normalize(i_v), l2_normalize(i_t_pooled), tau)


def inter_loss(parts: Mapping[str, Tensor], weights: AlignmentWeights) -> Tensor:
    """L_I2T + L_T2I + w_e * L_emo + w_i * L_int; absent parts count as zero."""
    total = Tensor(0.0)
    for key, w in (("i2t", 1.0), ("t2i", 1.0), ("emo", weights.w_e), ("int", weights.w_i)):
        if key in parts and w != 0.0:
            total = total + parts[key] * w
    return total


# ------------------------------------------------------------------ intra-modality
class ViewHeads(Module):
    """The two view-specific projection heads of one modality."""

    def __init__(self, rng: np.random.Generator, d: int):
        self.head_a = Linear(rng, d, d)
        self.head_b = Linear(rng, d, d)
        # separate parameters with a shared starting point: two unrelated random maps would
        # make the views disagree at step 0 and the contrastive term would open with a large,
        # encoder-scrambling gradient instead of measuring dropout noise
        self.head_b.weight.data[...] = self.head_a.weight.data
        self.head_b.bias.data[...] = self.head_a.bias.data


def two_view(
    features: Tensor,
    rate: float,
    seed_a,
    seed_b,
    head_a=None,
    head_b=None,
) -> tuple[Tensor, Tensor]:
    """Two independently dropped-out copies of ``features``, each through its own head."""
    if seed_a is not None and seed_a == seed_b:
        raise ValidationError("two_view needs distinct seeds so the views are independent")
    v1 = dropout(features, rate, seed_a)
    v2 = dropout(features, rate, seed_b)
    if head_a is not None:
        v1 = head_a(v1)
    if head_b is not None:
        v2 = head_b(v2)
    return v1, v2


def symmetric_kl(p1: Tensor, p2: Tensor) -> Tensor:
    """0.5 * [KL(p1||p2) + KL(p2||p1)], averaged over any leading batch axes."""
    return ((kl_divergence(p1, p2) + kl_divergence(p2, p1)) * 0.5).mean()


def instance_contrastive(z1: Tensor, z2: Tensor, tau: float = DEFAULT_TAU) -> Tensor:
    """Symmetric view-vs-view InfoNCE on cosine-similarity logits."""
    _check_batch(z1, "z1")
    _check_batch(z2, "z2")
    return symmetric_nce(l2_normalize(z1), l2_normalize(z2), tau)


@dataclass
class ModalityIntra:
    emo: Tensor | None
    int: Tensor | None
    con: Tensor


def modality_intra_terms(
    features: Tensor,
    heads: ViewHeads,
    emo_head,
    int_head,
    rate: float,
    seed_a,
    seed_b,
    tau: float,
    with_emotion: bool = True,
    with_intention: bool = True,
) -> ModalityIntra:
    """Two-view consistency terms for one modality, reusing the shared emotion/intention heads."""
    v1, v2 = two_view(features, rate, seed_a, seed_b, heads.head_a, heads.head_b)
    emo = symmetric_kl(softmax(emo_head(v1)), softmax(emo_head(v2))) if with_emotion else None
    inten = symmetric_kl(softmax(int_head(v1)), softmax(int_head(v2))) if with_intention else None
    return ModalityIntra(emo=emo, int=inten, con=instance_contrastive(v1, v2, tau))


def intra_loss(terms: Mapping[str, ModalityIntra], weights: AlignmentWeights) -> Tensor:
    """Sum over modalities ('t', 'v') of w_e^m L_emo^m + w_i^m L_int^m + L_con^m."""
    total = Tensor(0.0)
    for m, t in terms.items():
        w_e = weights.w_e_t if m == "t" else weights.w_e_v
        w_i = weights.w_i_t if m == "t" else weights.w_i_v
        if t.emo is not None and w_e != 0.0:
            total = total + t.emo * w_e
        if t.int is not None and w_i != 0.0:
            total = total + t.int * w_i
        total = total + t.con
    return total
