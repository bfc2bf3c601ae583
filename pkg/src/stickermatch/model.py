"""End-to-end sticker selector: encoders, alignment terms, guided fusion and score mixing."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .alignment import (
    DEFAULT_VIEW_DROPOUT,
    AlignmentWeights,
    ModalityIntra,
    ViewHeads,
    emotion_align_loss,
    info_nce_i2t,
    info_nce_t2i,
    intention_align_loss,
    modality_intra_terms,
)
from .data import Batch
from .encoders import EncoderConfig, Encoders, project_cls, text_emotion_embed
from .errors import ConfigError
from .fusion import (
    DEFAULT_ETA,
    DEFAULT_N_REFINE,
    DEFAULT_SD_PROB,
    GuidedAttentionFusion,
    KnowledgeSelector,
    PlainAttentionFusion,
    ScoreMixer,
    final_score,
    normalized_cosine,
    predict_pvl,
    samm_combine,
)
from .numcore import Linear, Module, Tensor, binary_cross_entropy, concat, softmax


@dataclass(frozen=True)
class AblationSpec:
    """Which submodules are switched on. ``semantic`` keeps the I2T/T2I alignment."""

    emotion: bool = True
    intention: bool = True
    inter: bool = True
    intra: bool = True
    eiks: bool = True
    iega: bool = True
    samm: bool = True
    semantic: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.inter and self.samm:
            raise ConfigError("SAMM builds on inter-modality emotion/intention alignment; disable it with inter")

    @property
    def eiks_active(self) -> bool:
        return self.eiks and self.emotion and self.intention

    @property
    def iega_active(self) -> bool:
        return self.iega and (self.emotion or self.intention)

    @property
    def samm_active(self) -> bool:
        return self.samm and self.inter and (self.emotion or self.intention)

    def key(self) -> str:
        return "".join("1" if getattr(self, f.name) else "0" for f in fields(self))

    def to_dict(self) -> dict:
        return asdict(self)


FULL = AblationSpec()
BASE = AblationSpec(emotion=False, intention=False, inter=False, intra=False, eiks=False, iega=False, samm=False)

PRESETS: dict[str, dict[str, AblationSpec]] = {
    "table4": {
        "no_samm": AblationSpec(samm=False),
        "no_iega": AblationSpec(iega=False),
        "no_eiks": AblationSpec(eiks=False),
        "no_intra": AblationSpec(intra=False),
        "no_inter": AblationSpec(inter=False, samm=False),
        "full": FULL,
    },
    "fig3": {
        "full": FULL,
        "no_intention": AblationSpec(intention=False),
        "no_emotion": AblationSpec(emotion=False),
        "base": BASE,
    },
}
PRESETS["all"] = {**PRESETS["table4"], **PRESETS["fig3"]}


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    weights: AlignmentWeights = field(default_factory=AlignmentWeights)
    eta: float = DEFAULT_ETA
    n_refine: int = DEFAULT_N_REFINE
    sd_prob: float = DEFAULT_SD_PROB
    view_dropout: float = DEFAULT_VIEW_DROPOUT

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "weights": self.weights.to_dict(),
            "eta": self.eta,
            "n_refine": self.n_refine,
            "sd_prob": self.sd_prob,
            "view_dropout": self.view_dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            encoder=EncoderConfig(**d.get("encoder", {})),
            weights=AlignmentWeights(**d.get("weights", {})),
            **{k: v for k, v in d.items() if k not in ("encoder", "weights")},
        )


@dataclass
class ForwardOutput:
    p_final: Tensor  # (B, N)
    p_vl: Tensor
    parts: dict[str, Tensor]
    intra: dict[str, ModalityIntra]
    features: dict[str, Tensor]
    s_emo: Tensor | None = None
    s_int: Tensor | None = None


class _Streams:
    """Independent integer seeds for every stochastic site of one forward pass."""

    def __init__(self, seed):
        self._ss = np.random.SeedSequence(seed)

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(self._ss.spawn(1)[0])

    def seed(self) -> int:
        return int(self._ss.spawn(1)[0].generate_state(1)[0])


class StickerSelector(Module):
    def __init__(self, cfg: ModelConfig, ablation: AblationSpec = FULL, seed: int = 42):
        self.cfg = cfg
        self.ablation = ablation
        ecfg = cfg.encoder
        d = ecfg.d_model
        rng = np.random.default_rng(seed)
        self.enc = Encoders(rng, ecfg)
        self.eiks = KnowledgeSelector(rng, d, ecfg.n_emotions, cfg.eta, cfg.n_refine)
        self.emo_to_model = Linear(rng, ecfg.d_emo, d)
        self.iega = GuidedAttentionFusion(rng, d, ecfg.n_heads)
        self.plain = PlainAttentionFusion(rng, d, ecfg.n_heads)
        self.match_head = Linear(rng, d, 1)
        self.mixer = ScoreMixer()
        self.views_t = ViewHeads(rng, d)
        self.views_v = ViewHeads(rng, d)

    def forward(self, batch: Batch, seed=None, with_losses: bool = True) -> ForwardOutput:
        """Score every candidate of every sample; ``seed=None`` means inference mode.

        In inference mode no dropout or stochastic depth is applied and the
        result is a pure function of the parameters and the batch.
        """
        ab = self.ablation
        ecfg = self.cfg.encoder
        train = seed is not None
        streams = _Streams(seed) if train else None
        enc_rng = streams.generator() if train else None

        bsz, n_cand = batch.labels.shape
        rows = np.arange(bsz)

        f_t, text_valid = self.enc.text(batch.token_ids, enc_rng)  # (B, Lt, d)
        f_v = self.enc.image(batch.pixels, enc_rng)  # (B, N, Lv, d)
        t_cls = f_t[:, 0, :]
        v_cls = f_v[:, :, 0, :]
        parts: dict[str, Tensor] = {}
        features: dict[str, Tensor] = {"t_cls": t_cls, "v_cls": v_cls}

        need_emotion = ab.emotion
        need_intention = ab.intention

        e_t_emb = e_v = i_t = i_t_ref = i_t_pool = i_v = None
        if need_emotion:
            e_t_emb = text_emotion_embed(batch.e_t, self.enc.emo_table)  # (B, 7)
            e_v = self.enc.emotion_head_visual(v_cls)  # (B, N, 7)
        if need_intention:
            i_t = self.enc.encode_intention(batch.comet, enc_rng)  # (B, R, d)
            i_t_ref = self.eiks(i_t, batch.e_t) if ab.eiks_active else i_t
            i_t_pool = i_t_ref.mean(axis=1)
            i_v = self.enc.intention_head_visual(v_cls)  # (B, N, d)
            features.update(i_t=i_t, i_t_refined=i_t_ref, i_v=i_v)

        # ---- fusion
        sd_mask = None
        if train and self.cfg.sd_prob > 0:
            keep = streams.generator().random((bsz, n_cand, 1, 1)) >= self.cfg.sd_prob
            sd_mask = keep / (1.0 - self.cfg.sd_prob)
        # only the CLS query row of the fused text stream feeds the match head, and
        # queries never interact, so fusing that single row is exact
        t_query = t_cls.reshape(bsz, 1, 1, ecfg.d_model)
        if ab.iega_active:
            guide = []
            if need_intention:
                guide.append(i_t_ref)
            if need_emotion:
                guide.append(self.emo_to_model(e_t_emb).reshape(bsz, 1, ecfg.d_model))
            e_it = concat(guide, axis=1).reshape(bsz, 1, -1, ecfg.d_model)
            z = self.iega(f_v, t_query, e_it, sd_mask).z_fuse
        else:
            f_t_all = f_t.reshape(bsz, 1, f_t.shape[1], ecfg.d_model)
            z = self.plain(f_v, t_query, f_t_all, text_valid, sd_mask).z_fuse
        p_vl = predict_pvl(self.match_head, z)  # (B, N)

        s_emo = s_int = None
        if ab.samm_active:
            if need_emotion:
                # compare the emotion distributions the KL alignment acts on, measured from the
                # uniform distribution: raw vectors can be antipodal yet KL-aligned, and two
                # uncentered distributions always have cosine >= 0, so every pair looks similar
                u = 1.0 / ecfg.n_emotions
                s_emo = normalized_cosine((softmax(e_t_emb) - u).reshape(bsz, 1, -1), softmax(e_v) - u)
            if need_intention:
                s_int = normalized_cosine(i_t_pool.reshape(bsz, 1, -1), i_v)
            if s_emo is not None and s_int is not None:
                s_ei = samm_combine(s_emo, s_int, self.mixer.alpha)
            else:
                s_ei = s_emo if s_emo is not None else s_int
            p_final = final_score(p_vl, s_ei, self.mixer.beta)
        else:
            p_final = p_vl

        out = ForwardOutput(p_final=p_final, p_vl=p_vl, parts=parts, intra={}, features=features,
                            s_emo=s_emo, s_int=s_int)
        if not with_losses:
            return out

        # ---- losses
        tau = self.cfg.weights.tau
        parts["itm"] = binary_cross_entropy(p_final, batch.labels)
        if ab.samm_active:
            # direct supervision of the fusion head; without it p_vl saturates at 0 because
            # the similarity term alone already lifts p_final above the positive rate
            parts["itm_vl"] = binary_cross_entropy(p_vl, batch.labels)
        pos = batch.positive_index
        if ab.semantic:
            ft_hat = project_cls(t_cls, self.enc.w_t)
            fv_hat = project_cls(v_cls, self.enc.w_v)  # (B, N, dp)
            neg_idx = np.array([[j for j in range(n_cand) if j != p] for p in pos])
            fv_pos = fv_hat[rows, pos]
            fv_neg = fv_hat[rows[:, None], neg_idx]
            parts["i2t"] = info_nce_i2t(fv_pos, ft_hat, tau)
            parts["t2i"] = info_nce_t2i(ft_hat, fv_pos, fv_neg, tau)
            features.update(ft_hat=ft_hat, fv_hat=fv_hat)
        if ab.inter and need_emotion:
            parts["emo"] = emotion_align_loss(e_v[rows, pos], e_t_emb)
        if ab.inter and need_intention:
            parts["int"] = intention_align_loss(i_v[rows, pos], i_t_pool, tau)
        if ab.eiks_active:
            _, ce = self.eiks.emotion_classify(t_cls, batch.e_t)
            parts["emo_prime"] = ce.mean()
        if ab.intra:
            rate = self.cfg.view_dropout if train else 0.0
            seeds = [streams.seed() for _ in range(4)] if train else [None, None, None, None]
            for m, feats, heads, (sa, sb) in (
                ("t", t_cls, self.views_t, seeds[:2]),
                ("v", v_cls[rows, pos], self.views_v, seeds[2:]),
            ):
                out.intra[m] = modality_intra_terms(
                    feats, heads, self.enc.f_emo, self.enc.f_int, rate, sa, sb, tau,
                    with_emotion=need_emotion, with_intention=need_intention,
                )
        return out

    def score(self, batch: Batch) -> np.ndarray:
        """Inference-mode p_final, shape (B, N)."""
        return self.forward(batch, seed=None, with_losses=False).p_final.data.copy()
