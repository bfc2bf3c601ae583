"""Toy transformer encoders and the projection / emotion / intention heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError, ValidationError
from .numcore import (
    LayerNorm,
    Linear,
    Module,
    Tensor,
    concat,
    dropout,
    embedding,
    gelu,
    l2_normalize,
    matmul,
    softmax,
)
from .numcore.nn import uniform_param

PAD_ID = 0
CLS_ID = 1
SEP_ID = 2
MASK_VALUE = -1e9

RELATIONS = ("xIntent", "xNeed", "xWant", "xEffect")
EMO_TABLE_SCALE = 3.0


@dataclass
class EncoderConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    vocab_size: int = 500
    max_text_len: int = 64
    patch_grid: int = 4
    patch_dim: int = 8
    n_emotions: int = 7
    n_relations: int = 4
    dropout_rate: float = 0.1
    d_proj: int = 32

    def __post_init__(self):
        self.validate()

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_patches(self) -> int:
        return self.patch_grid * self.patch_grid

    @property
    def d_emo(self) -> int:
        # emotion embeddings live in the 7-way category space so KL is defined on them
        return self.n_emotions

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_emotions != 7:
            raise ConfigError("n_emotions must be 7")
        if self.n_relations != len(RELATIONS):
            raise ConfigError(f"n_relations must be {len(RELATIONS)}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        for name in ("d_model", "n_heads", "n_layers", "vocab_size", "max_text_len", "patch_grid", "patch_dim", "d_proj"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# -------------------------------------------------------------------- attention
def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(..., L, d) -> (..., h, L, d/h)."""
    *lead, length, d = x.shape
    return x.reshape(*lead, length, n_heads, d // n_heads).swapaxes(-2, -3)


def merge_heads(x: Tensor) -> Tensor:
    """(..., h, L, dh) -> (..., L, h*dh)."""
    *lead, h, length, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, length, h * dh)


def attention_weights(q: Tensor, k: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-stochastic ``softmax(q kᵀ / sqrt(d_head))``; ``mask`` is additive."""
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(q.shape[-1]))
    if mask is not None:
        scores = scores + mask
    return softmax(scores, axis=-1)


class SelfAttention(Module):
    def __init__(self, rng: np.random.Generator, d: int, n_heads: int):
        self.qkv = Linear(rng, d, 3 * d)
        self.out = Linear(rng, d, d)
        self.n_heads = n_heads
        self.d = d

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        qkv = self.qkv(x)
        d = self.d
        q = split_heads(qkv[..., :d], self.n_heads)
        k = split_heads(qkv[..., d : 2 * d], self.n_heads)
        v = split_heads(qkv[..., 2 * d :], self.n_heads)
        att = attention_weights(q, k, mask)
        return self.out(merge_heads(matmul(att, v)))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, rng: np.random.Generator, d: int, n_heads: int, dropout_rate: float):
        self.ln1 = LayerNorm(d)
        self.attn = SelfAttention(rng, d, n_heads)
        self.ln2 = LayerNorm(d)
        self.fc1 = Linear(rng, d, 2 * d)
        self.fc2 = Linear(rng, 2 * d, d)
        self.dropout_rate = dropout_rate

    def __call__(self, x: Tensor, mask=None, rng: np.random.Generator | None = None) -> Tensor:
        x = x + dropout(self.attn(self.ln1(x), mask), self.dropout_rate, rng)
        return x + dropout(self.fc2(gelu(self.fc1(self.ln2(x)))), self.dropout_rate, rng)


# ---------------------------------------------------------------------- encoders
class TextEncoder(Module):
    def __init__(self, rng: np.random.Generator, cfg: EncoderConfig):
        d = cfg.d_model
        self.cfg = cfg
        self.tok = uniform_param(rng, (cfg.vocab_size, d), d)
        self.pos = uniform_param(rng, (cfg.max_text_len + 1, d), d)
        self.blocks = [Block(rng, d, cfg.n_heads, cfg.dropout_rate) for _ in range(cfg.n_layers)]
        self.ln = LayerNorm(d)

    def pad(self, sequences: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
        """Prepend CLS and right-pad; returns ``(ids, valid)`` of shape (B, L+1)."""
        for seq in sequences:
            if len(seq) > self.cfg.max_text_len:
                raise ValidationError(f"sequence of length {len(seq)} exceeds max_text_len={self.cfg.max_text_len}")
            if len(seq) and (min(seq) < 0 or max(seq) >= self.cfg.vocab_size):
                raise ValidationError(f"token id out of vocabulary range [0, {self.cfg.vocab_size})")
        width = 1 + max((len(s) for s in sequences), default=0)
        ids = np.full((len(sequences), width), PAD_ID, dtype=np.int64)
        valid = np.zeros((len(sequences), width), dtype=bool)
        for i, seq in enumerate(sequences):
            ids[i, 0] = CLS_ID
            ids[i, 1 : 1 + len(seq)] = seq
            valid[i, : 1 + len(seq)] = True
        return ids, valid

    def __call__(self, sequences: Sequence[Sequence[int]], rng: np.random.Generator | None = None) -> tuple[Tensor, np.ndarray]:
        """Encode a batch of token sequences into (B, L+1, d) features plus the validity mask."""
        ids, valid = self.pad(sequences)
        x = embedding(self.tok, ids) + self.pos[: ids.shape[1]]
        mask = np.where(valid, 0.0, MASK_VALUE)[:, None, None, :]
        for block in self.blocks:
            x = block(x, mask, rng)
        return self.ln(x), valid


class ImageEncoder(Module):
    def __init__(self, rng: np.random.Generator, cfg: EncoderConfig):
        d = cfg.d_model
        self.cfg = cfg
        self.patch = Linear(rng, cfg.patch_dim, d)
        self.cls = uniform_param(rng, (1, d), d)
        self.pos = uniform_param(rng, (cfg.n_patches + 1, d), d)
        self.blocks = [Block(rng, d, cfg.n_heads, cfg.dropout_rate) for _ in range(cfg.n_layers)]
        self.ln = LayerNorm(d)

    def __call__(self, pixels, rng: np.random.Generator | None = None) -> Tensor:
        """Encode images of shape (..., n_patches, patch_dim) into (..., n_patches+1, d)."""
        px = pixels if isinstance(pixels, Tensor) else Tensor(np.asarray(pixels, dtype=np.float64))
        if px.ndim < 2 or px.shape[-2:] != (self.cfg.n_patches, self.cfg.patch_dim):
            raise ValidationError(
                f"image must have trailing shape ({self.cfg.n_patches}, {self.cfg.patch_dim}), got {px.shape}"
            )
        lead = px.shape[:-2]
        flat = px.reshape(-1, self.cfg.n_patches, self.cfg.patch_dim)
        tokens = self.patch(flat)
        cls = self.cls.reshape(1, 1, -1) + Tensor(np.zeros((flat.shape[0], 1, 1)))
        x = concat([cls, tokens], axis=1) + self.pos
        for block in self.blocks:
            x = block(x, None, rng)
        x = self.ln(x)
        return x.reshape(*lead, self.cfg.n_patches + 1, self.cfg.d_model)


# ---------------------------------------------------------------------- heads
def project_cls(f_cls: Tensor, weight: Tensor) -> Tensor:
    """Linear projection into the shared space followed by L2 normalisation."""
    if f_cls.shape[-1] != weight.shape[0]:
        raise DimensionError(f"cannot project features {f_cls.shape} with weight {weight.shape}")
    if f_cls.ndim == 1:
        return l2_normalize(matmul(f_cls.reshape(1, -1), weight).reshape(-1))
    return l2_normalize(matmul(f_cls, weight))


def text_emotion_embed(e_t, emotion_table: Tensor) -> Tensor:
    """Row of the emotion embedding table for the dominant emotion (lowest index on ties)."""
    e = np.asarray(e_t, dtype=np.float64)
    idx = np.argmax(e, axis=-1)
    return emotion_table[idx]


class Encoders(Module):
    """Both encoders plus every head that turns their CLS outputs into the feature symbols."""

    def __init__(self, rng: np.random.Generator, cfg: EncoderConfig):
        d = cfg.d_model
        self.cfg = cfg
        self.text = TextEncoder(rng, cfg)
        self.image = ImageEncoder(rng, cfg)
        self.w_t = uniform_param(rng, (d, cfg.d_proj), d)
        self.w_v = uniform_param(rng, (d, cfg.d_proj), d)
        # each category starts as a peaked log-distribution over itself; from a random start the
        # emotion alignment can settle on near-uniform distributions that carry no signal
        self.emo_table = Tensor(EMO_TABLE_SCALE * np.eye(cfg.n_emotions), requires_grad=True)
        self.f_emo = Linear(rng, d, cfg.d_emo)
        self.f_int = Linear(rng, d, d)

    def emotion_head_visual(self, f_v_cls: Tensor) -> Tensor:
        return self.f_emo(f_v_cls)

    def intention_head_visual(self, f_v_cls: Tensor) -> Tensor:
        return self.f_int(f_v_cls)

    def encode_intention(self, relation_seqs: Sequence[Sequence[Sequence[int]]], rng=None) -> Tensor:
        """Per-relation CLS features, shape (B, n_relations, d), rows in ``RELATIONS`` order."""
        flat = []
        for seqs in relation_seqs:
            if len(seqs) != self.cfg.n_relations:
                raise ValidationError(f"expected {self.cfg.n_relations} relation sequences, got {len(seqs)}")
            for seq in seqs:
                if len(seq) == 0:
                    raise ValidationError("relation sequence must be nonempty")
                flat.append(seq)
        feats, _ = self.text(flat, rng)
        return feats[:, 0, :].reshape(len(relation_seqs), self.cfg.n_relations, self.cfg.d_model)


def encode_text(tokens: Sequence[int], encoder: TextEncoder, rng=None) -> Tensor:
    """Single-sequence convenience wrapper: returns (len+1, d)."""
    feats, _ = encoder([list(tokens)], rng)
    return feats[0]


def encode_image(pixels, encoder: ImageEncoder, rng=None) -> Tensor:
    return encoder(pixels, rng)
