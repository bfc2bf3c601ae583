"""Loss aggregation, AdamW, the training loop and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .alignment import inter_loss, intra_loss
from .data import Batch, DialogueSample, make_batches
from .errors import ConfigError, NonFiniteLossError
from .evaluator import MetricsReport, evaluate
from .model import FULL, AblationSpec, ModelConfig, StickerSelector
from .numcore import Tensor, backward, binary_cross_entropy

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 5e-5
    epochs: int = 5
    batch_size: int = 16
    seed: int = 42
    w_emo_prime: float = 0.5
    w_vl: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float | None = 5.0
    max_steps: int | None = None
    eval_batch_size: int = 50

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


def config_hash(*parts: dict) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ------------------------------------------------------------------ losses
def matching_loss(p_final: Tensor, labels) -> Tensor:
    """Mean BCE over every candidate slot of every sample."""
    return binary_cross_entropy(p_final, labels)


@dataclass
class LossBreakdown:
    total: float
    components: dict[str, float]
    raw: dict[str, float] = field(default_factory=dict)


def total_loss(model: StickerSelector, batch: Batch, w_emo_prime: float = 0.5, seed=None,
               w_vl: float = 1.0) -> tuple[Tensor, LossBreakdown]:
    """L_itm + L_inter + L_intra + w'_e L'_emo, with a per-component breakdown.

    When SAMM is active, ``w_vl`` adds a BCE on the fusion head's p_vl as well.
    """
    out = model.forward(batch, seed=seed, with_losses=True)
    weights = model.cfg.weights
    comps: dict[str, Tensor] = {"itm": out.parts["itm"]}
    if "itm_vl" in out.parts and w_vl != 0.0:
        comps["itm_vl"] = out.parts["itm_vl"] * w_vl
    inter_parts = {k: out.parts[k] for k in ("i2t", "t2i", "emo", "int") if k in out.parts}
    if inter_parts:
        comps["inter"] = inter_loss(inter_parts, weights)
    if out.intra:
        comps["intra"] = intra_loss(out.intra, weights)
    if "emo_prime" in out.parts and w_emo_prime != 0.0:
        comps["emo_prime"] = out.parts["emo_prime"] * w_emo_prime

    raw = {k: float(v.data) for k, v in out.parts.items()}
    for m, t in out.intra.items():
        raw[f"con_{m}"] = float(t.con.data)
        if t.emo is not None:
            raw[f"intra_emo_{m}"] = float(t.emo.data)
        if t.int is not None:
            raw[f"intra_int_{m}"] = float(t.int.data)
    for name, value in {**{k: float(v.data) for k, v in comps.items()}, **raw}.items():
        if not math.isfinite(value):
            raise NonFiniteLossError(name, value)

    total = comps["itm"]
    for k in ("itm_vl", "inter", "intra", "emo_prime"):
        if k in comps:
            total = total + comps[k]
    breakdown = LossBreakdown(float(total.data), {k: float(v.data) for k, v in comps.items()}, raw)
    return total, breakdown


# ------------------------------------------------------------------ optimizer
class AdamW:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, named_params: dict[str, Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = named_params
        self.lr, self.beta1, self.beta2, self.eps, self.weight_decay = lr, beta1, beta2, eps, weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in named_params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in named_params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                p.data = p.data - self.lr * self.weight_decay * p.data
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / c1
            v_hat = self.v[k] / c2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()}, "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = {k: np.asarray(state["m"][k], dtype=np.float64).copy() for k in self.params}
        self.v = {k: np.asarray(state["v"][k], dtype=np.float64).copy() for k in self.params}


def optimizer_step(opt: AdamW) -> None:
    opt.step()


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# ------------------------------------------------------------------ trainer
def check_compatibility(samples: Sequence[DialogueSample], model_cfg: ModelConfig) -> None:
    """Fail before the first step if the data cannot flow through the encoders."""
    ecfg = model_cfg.encoder
    for s in samples:
        if s.candidates.shape[1:] != (ecfg.n_patches, ecfg.patch_dim):
            raise ConfigError(
                f"sample {s.sample_id}: sticker shape {s.candidates.shape[1:]} does not match encoder "
                f"({ecfg.n_patches}, {ecfg.patch_dim})"
            )
        if len(s.token_ids) > ecfg.max_text_len:
            raise ConfigError(f"sample {s.sample_id}: dialogue longer than max_text_len={ecfg.max_text_len}")
        ids = list(s.token_ids) + [t for seq in s.comet_sequences for t in seq]
        if ids and max(ids) >= ecfg.vocab_size:
            raise ConfigError(f"sample {s.sample_id}: token id {max(ids)} outside vocab_size={ecfg.vocab_size}")


@dataclass
class StepRecord:
    step: int
    epoch: int
    loss: float
    components: dict[str, float]


class Trainer:
    """Owns a model, its optimizer and the step counters; fully determined by the seed."""

    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig, ablation: AblationSpec = FULL):
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.ablation = ablation
        self.model = StickerSelector(model_cfg, ablation, seed=train_cfg.seed)
        self.named = dict(self.model.named_parameters())
        self.opt = AdamW(self.named, train_cfg.lr, train_cfg.beta1, train_cfg.beta2, train_cfg.eps,
                         train_cfg.weight_decay)
        self.step = 0
        self.trace: list[StepRecord] = []
        self.history: list[dict] = []
        self.best_map = -1.0
        self.best_state: dict[str, np.ndarray] | None = None

    @property
    def config_hash(self) -> str:
        return config_hash(self.model_cfg.to_dict(), self.cfg.to_dict(), self.ablation.to_dict())

    def epoch_order(self, epoch: int, n: int) -> np.ndarray:
        return np.random.default_rng([self.cfg.seed, 77, epoch]).permutation(n)

    def steps_per_epoch(self, n: int) -> int:
        return math.ceil(n / self.cfg.batch_size)

    def train_step(self, batch: Batch, epoch: int) -> StepRecord:
        self.model.zero_grad()
        loss, bd = total_loss(self.model, batch, self.cfg.w_emo_prime, seed=[self.cfg.seed, 1000, self.step],
                              w_vl=self.cfg.w_vl)
        backward(loss)
        if self.cfg.grad_clip:
            clip_grad_norm(list(self.named.values()), self.cfg.grad_clip)
        self.opt.step()
        rec = StepRecord(self.step, epoch, bd.total, bd.components)
        self.trace.append(rec)
        self.step += 1
        return rec

    def fit(self, train: Sequence[DialogueSample], val: Sequence[DialogueSample] | None = None,
            stop_at_step: int | None = None, log_path: str | Path | None = None,
            checkpoint_dir: str | Path | None = None) -> "Trainer":
        """Run epochs of shuffled mini-batches from the current step onward.

        ``stop_at_step`` halts after that many total steps (used to simulate an
        interruption); ``cfg.max_steps`` caps training the same way.
        """
        check_compatibility(train, self.model_cfg)
        if val:
            check_compatibility(val, self.model_cfg)
        n = len(train)
        spe = self.steps_per_epoch(n)
        end = spe * self.cfg.epochs if self.cfg.max_steps is None else self.cfg.max_steps
        limit = end if stop_at_step is None else min(end, stop_at_step)
        log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
        try:
            while self.step < limit:
                epoch, offset = divmod(self.step, spe)
                order = self.epoch_order(epoch, n)
                idx = order[offset * self.cfg.batch_size : (offset + 1) * self.cfg.batch_size]
                rec = self.train_step(Batch.from_samples([train[i] for i in idx]), epoch)
                if log_fh:
                    comps = ",".join(f"{k}={v:.6g}" for k, v in sorted(rec.components.items()))
                    log_fh.write(f"{rec.step}\t{rec.epoch}\t{rec.loss:.10g}\t{comps}\t\n")
                if self.step % spe == 0 or self.step == end:
                    self._end_of_epoch(epoch, val, log_fh, checkpoint_dir)
        finally:
            if log_fh:
                log_fh.close()
        return self

    def _end_of_epoch(self, epoch: int, val, log_fh, checkpoint_dir) -> None:
        entry = {"epoch": epoch, "step": self.step}
        if val:
            report = evaluate(self.model, val, self.cfg.eval_batch_size)
            entry["val_map"] = report.map
            if report.map > self.best_map:
                self.best_map = report.map
                self.best_state = self.model.state_dict()
                if checkpoint_dir:
                    save_checkpoint(self, Path(checkpoint_dir) / "best.npz")
            if log_fh:
                log_fh.write(f"{self.step}\t{epoch}\t\t\t{report.map:.6f}\n")
            log.info("epoch %d step %d val MAP %.4f", epoch, self.step, report.map)
        self.history.append(entry)
        if checkpoint_dir:
            save_checkpoint(self, Path(checkpoint_dir) / "last.npz")

    def evaluate(self, samples: Sequence[DialogueSample]) -> MetricsReport:
        return evaluate(self.model, samples, self.cfg.eval_batch_size)

    def use_best(self) -> None:
        if self.best_state is not None:
            self.model.load_state_dict(self.best_state)


def fit(train: Sequence[DialogueSample], val: Sequence[DialogueSample] | None, model_cfg: ModelConfig,
        train_cfg: TrainConfig, ablation: AblationSpec = FULL, **kwargs) -> Trainer:
    return Trainer(model_cfg, train_cfg, ablation).fit(train, val, **kwargs)


# ------------------------------------------------------------------ checkpoints
def save_checkpoint(trainer: Trainer, path: str | Path) -> Path:
    """Write parameters, optimizer moments, counters and configs to one ``.npz`` file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": p.data for k, p in trainer.named.items()}
    opt = trainer.opt.state()
    arrays.update({f"adam_m/{k}": v for k, v in opt["m"].items()})
    arrays.update({f"adam_v/{k}": v for k, v in opt["v"].items()})
    if trainer.best_state is not None:
        arrays.update({f"best/{k}": v for k, v in trainer.best_state.items()})
    meta = {
        "step": trainer.step,
        "adam_t": opt["t"],
        "best_map": trainer.best_map,
        "history": trainer.history,
        "trace": [asdict(r) for r in trainer.trace],
        "rng": {"seed": trainer.cfg.seed, "next_step": trainer.step},
        "config_hash": trainer.config_hash,
        "model_config": trainer.model_cfg.to_dict(),
        "train_config": trainer.cfg.to_dict(),
        "ablation": trainer.ablation.to_dict(),
    }
    arrays["meta"] = np.array(json.dumps(meta))
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Trainer:
    """Rebuild a :class:`Trainer` exactly as it was when saved."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        arrays = {k: z[k] for k in z.files if k != "meta"}
    trainer = Trainer(
        ModelConfig.from_dict(meta["model_config"]),
        TrainConfig(**meta["train_config"]),
        AblationSpec(**meta["ablation"]),
    )
    if trainer.config_hash != meta["config_hash"]:
        raise ConfigError(f"checkpoint {path} config hash mismatch")
    trainer.model.load_state_dict({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    trainer.opt.load_state({
        "t": meta["adam_t"],
        "m": {k[len("adam_m/"):]: v for k, v in arrays.items() if k.startswith("adam_m/")},
        "v": {k[len("adam_v/"):]: v for k, v in arrays.items() if k.startswith("adam_v/")},
    })
    best = {k[len("best/"):]: v for k, v in arrays.items() if k.startswith("best/")}
    trainer.best_state = best or None
    trainer.best_map = meta["best_map"]
    trainer.step = meta["step"]
    trainer.history = meta["history"]
    trainer.trace = [StepRecord(**r) for r in meta["trace"]]
    return trainer
