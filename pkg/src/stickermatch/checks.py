"""Finite-difference check of the complete training loss on a tiny model."""

from __future__ import annotations

from .data import Batch, GeneratorConfig, generate_corpus
from .encoders import EncoderConfig
from .model import FULL, AblationSpec, ModelConfig, StickerSelector
from .numcore import GradCheckReport, grad_check
from .trainer import total_loss


def tiny_setup(dim: int = 8, batch: int = 4, n_candidates: int = 4, seed: int = 0,
               ablation: AblationSpec = FULL) -> tuple[StickerSelector, Batch]:
    """A model of width ``dim`` and one training batch drawn from a small synthetic corpus."""
    if dim % 2:
        raise ValueError(f"dim must be even so two attention heads divide it, got {dim}")
    gcfg = GeneratorConfig(n_samples=batch, val_fraction=0.0, test_fraction=0.0, n_candidates=n_candidates,
                           max_turns=2, max_utterance_len=5, patch_grid=2, patch_dim=4, seed=seed)
    samples = generate_corpus(gcfg)["train"]
    ecfg = EncoderConfig(d_model=dim, n_heads=2, n_layers=1, vocab_size=gcfg.vocab_size,
                         max_text_len=gcfg.max_dialogue_len, patch_grid=2, patch_dim=4, d_proj=dim // 2)
    model = StickerSelector(ModelConfig(encoder=ecfg), ablation, seed=seed)
    return model, Batch.from_samples(samples)


# The full loss is a sum of several O(1) terms, so one ulp of it divided by the 2*eps
# step leaves about 2e-10 of noise in every numeric derivative. Coordinates whose true
# gradient is exactly zero (attention key biases, softmax shift invariance) need a floor
# well above that for a 1e-4 relative threshold to be meaningful.
FULL_LOSS_FLOOR = 1e-5


def full_loss_gradcheck(dim: int = 8, batch: int = 4, seed: int = 0, max_per_param: int | None = 6,
                        ablation: AblationSpec = FULL, w_emo_prime: float = 0.5,
                        floor: float = FULL_LOSS_FLOOR) -> GradCheckReport:
    """Gradient check of L_total with every stochastic site pinned to a fixed seed.

    Clipping is not part of the loss, so it plays no role here.
    """
    model, b = tiny_setup(dim, batch, seed=seed, ablation=ablation)
    forward_seed = [seed, 12345]

    def loss_fn():
        return total_loss(model, b, w_emo_prime, seed=forward_seed)[0]

    return grad_check(loss_fn, dict(model.named_parameters()), max_per_param=max_per_param, seed=seed,
                      floor=floor)
