"""Synthetic sticker-dialogue corpus with controllable emotion and intention structure.

Each sample has latent (topic, emotion, intent archetype) factors. Dialogue
tokens depend on topic and emotion only; the intent archetype reaches the
text side exclusively through the mock commonsense service, so intention
knowledge carries information the dialogue itself does not.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .encoders import RELATIONS, SEP_ID
from .errors import DatasetFormatError, ValidationError

N_EMOTIONS = 7
N_SPECIAL = 3
PIXEL_DECIMALS = 4
SPLITS = ("train", "val", "test")


@dataclass
class GeneratorConfig:
    n_samples: int = 3000
    val_fraction: float = 1 / 6
    test_fraction: float = 1 / 6
    n_candidates: int = 10
    n_topics: int = 8
    n_intent_archetypes: int = 6
    hard_negative_fraction: float = 0.4
    vocab_size: int = 500
    min_turns: int = 2
    max_turns: int = 4
    min_utterance_len: int = 3
    max_utterance_len: int = 8
    topic_token_prob: float = 0.4
    emotion_token_prob: float = 0.25
    emotion_token_noise: float = 0.2
    lexicon_filler_noise: float = 0.1
    words_per_topic: int = 12
    words_per_emotion: int = 8
    words_per_relation: int = 24
    comet_len: int = 4
    patch_grid: int = 4
    patch_dim: int = 8
    image_noise: float = 0.5
    seed: int = 42

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("hard_negative_fraction", "val_fraction", "test_fraction", "topic_token_prob",
                     "emotion_token_prob", "emotion_token_noise", "lexicon_filler_noise"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        if self.val_fraction + self.test_fraction >= 1.0:
            raise ValidationError("val_fraction + test_fraction must leave room for a training split")
        if self.topic_token_prob + self.emotion_token_prob > 1.0:
            raise ValidationError("topic_token_prob + emotion_token_prob must not exceed 1")
        if self.n_candidates < 2:
            raise ValidationError("n_candidates must be at least 2")
        if self.n_topics < 2 or self.n_intent_archetypes < 2:
            raise ValidationError("need at least two topics and two intent archetypes")
        if self.n_samples < 0:
            raise ValidationError("n_samples must be nonnegative")
        if not (1 <= self.min_turns <= self.max_turns) or not (1 <= self.min_utterance_len <= self.max_utterance_len):
            raise ValidationError("dialogue length ranges must satisfy 1 <= min <= max")
        if self.image_noise < 0:
            raise ValidationError("image_noise must be nonnegative")
        if self.comet_len < 1:
            raise ValidationError("comet_len must be positive")
        layout = VocabLayout.from_config(self)
        if layout.filler_start >= self.vocab_size:
            raise ValidationError(f"vocab_size={self.vocab_size} too small for the token layout")

    @property
    def max_dialogue_len(self) -> int:
        return self.max_turns * self.max_utterance_len + self.max_turns - 1

    def split_sizes(self) -> dict[str, int]:
        n_val = int(round(self.n_samples * self.val_fraction))
        n_test = int(round(self.n_samples * self.test_fraction))
        return {"train": self.n_samples - n_val - n_test, "val": n_val, "test": n_test}

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class VocabLayout:
    """Contiguous token-id ranges: specials, topic words, emotion words, relation words, filler."""

    n_topics: int
    words_per_topic: int
    words_per_emotion: int
    words_per_relation: int
    vocab_size: int

    @classmethod
    def from_config(cls, cfg: GeneratorConfig) -> "VocabLayout":
        return cls(cfg.n_topics, cfg.words_per_topic, cfg.words_per_emotion, cfg.words_per_relation, cfg.vocab_size)

    @property
    def topic_start(self) -> int:
        return N_SPECIAL

    @property
    def emotion_start(self) -> int:
        return self.topic_start + self.n_topics * self.words_per_topic

    @property
    def relation_start(self) -> int:
        return self.emotion_start + N_EMOTIONS * self.words_per_emotion

    @property
    def filler_start(self) -> int:
        return self.relation_start + len(RELATIONS) * self.words_per_relation

    def topic_words(self, t: int) -> range:
        s = self.topic_start + t * self.words_per_topic
        return range(s, s + self.words_per_topic)

    def emotion_words(self, c: int) -> range:
        s = self.emotion_start + c * self.words_per_emotion
        return range(s, s + self.words_per_emotion)

    def relation_words(self, r: int) -> range:
        s = self.relation_start + r * self.words_per_relation
        return range(s, s + self.words_per_relation)

    def filler_words(self) -> range:
        return range(self.filler_start, self.vocab_size)


# ------------------------------------------------------------------ mock services
class EmotionLexicon:
    """Token -> per-emotion count table; a dialogue's emotion is its normalised count sum.

    Emotion words count toward their own category. A seeded fraction of filler
    words also carries a spurious count, which makes the lexicon imperfect.
    """

    def __init__(self, layout: VocabLayout, seed: int = 42, filler_noise: float = 0.1):
        table = np.zeros((layout.vocab_size, N_EMOTIONS))
        for c in range(N_EMOTIONS):
            table[list(layout.emotion_words(c)), c] = 1.0
        rng = np.random.default_rng([seed, 7001])
        filler = np.array(layout.filler_words())
        noisy = filler[rng.random(filler.size) < filler_noise]
        table[noisy, rng.integers(0, N_EMOTIONS, size=noisy.size)] = 1.0
        self.table = table

    def __call__(self, token_ids: Sequence[int]) -> np.ndarray:
        counts = self.table[np.asarray(token_ids, dtype=np.int64)].sum(axis=0) if len(token_ids) else np.zeros(N_EMOTIONS)
        total = counts.sum()
        if total == 0:
            return np.full(N_EMOTIONS, 1.0 / N_EMOTIONS)
        return counts / total


def mock_emotion_lexicon(token_ids: Sequence[int], lexicon: EmotionLexicon) -> np.ndarray:
    return lexicon(token_ids)


class MockComet:
    """Deterministic stand-in for a commonsense inference model.

    Output depends on the dialogue's latent intent archetype and the relation,
    never on surface tokens; each relation draws from its own vocabulary range.
    """

    def __init__(self, layout: VocabLayout, seed: int = 42, length: int = 4):
        self.layout = layout
        self.seed = seed
        self.length = length

    def __call__(self, archetype: int, relation: str) -> list[int]:
        if relation not in RELATIONS:
            raise ValidationError(f"unknown relation {relation!r}; expected one of {RELATIONS}")
        r = RELATIONS.index(relation)
        rng = np.random.default_rng([self.seed, 9001, int(archetype), r])
        words = self.layout.relation_words(r)
        return [int(words.start + i) for i in rng.integers(0, len(words), size=self.length)]

    def infer_all(self, archetype: int) -> list[list[int]]:
        return [self(archetype, rel) for rel in RELATIONS]


# ------------------------------------------------------------------ sample type
@dataclass(eq=False)
class DialogueSample:
    sample_id: int
    token_ids: list[int]
    e_t: np.ndarray
    comet_sequences: list[list[int]]
    candidates: np.ndarray  # (n_candidates, n_patches, patch_dim)
    labels: np.ndarray  # (n_candidates,) with exactly one 1
    latent: dict = field(default_factory=dict)

    @property
    def positive_index(self) -> int:
        return int(np.argmax(self.labels))

    def __eq__(self, other) -> bool:
        if not isinstance(other, DialogueSample):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.token_ids == other.token_ids
            and np.array_equal(self.e_t, other.e_t)
            and self.comet_sequences == other.comet_sequences
            and np.array_equal(self.candidates, other.candidates)
            and np.array_equal(self.labels, other.labels)
            and self.latent == other.latent
        )

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "token_ids": list(self.token_ids),
            "e_t": [float(x) for x in self.e_t],
            "comet": [list(s) for s in self.comet_sequences],
            "pixel_shape": list(self.candidates.shape[1:]),
            "candidates": [[float(x) for x in c.reshape(-1)] for c in self.candidates],
            "labels": [int(x) for x in self.labels],
            "latent": self.latent,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "DialogueSample":
        shape = tuple(rec["pixel_shape"])
        return cls(
            sample_id=int(rec["sample_id"]),
            token_ids=[int(x) for x in rec["token_ids"]],
            e_t=np.asarray(rec["e_t"], dtype=np.float64),
            comet_sequences=[[int(x) for x in s] for s in rec["comet"]],
            candidates=np.asarray(rec["candidates"], dtype=np.float64).reshape((len(rec["candidates"]),) + shape),
            labels=np.asarray(rec["labels"], dtype=np.int64),
            latent=rec.get("latent", {}),
        )


# ------------------------------------------------------------------ generator
class CorpusGenerator:
    def __init__(self, cfg: GeneratorConfig):
        cfg.validate()
        self.cfg = cfg
        self.layout = VocabLayout.from_config(cfg)
        self.lexicon = EmotionLexicon(self.layout, cfg.seed, cfg.lexicon_filler_noise)
        self.comet = MockComet(self.layout, cfg.seed, cfg.comet_len)
        rng = np.random.default_rng([cfg.seed, 5003])
        shape = (cfg.patch_grid * cfg.patch_grid, cfg.patch_dim)
        self.topic_proto = rng.normal(size=(cfg.n_topics,) + shape)
        self.emotion_proto = rng.normal(size=(N_EMOTIONS,) + shape)
        self.intent_proto = rng.normal(size=(cfg.n_intent_archetypes,) + shape)

    def render(self, topic: int, emotion: int, archetype: int, rng: np.random.Generator) -> np.ndarray:
        base = (self.topic_proto[topic] + self.emotion_proto[emotion] + self.intent_proto[archetype]) / math.sqrt(3.0)
        pixels = base + self.cfg.image_noise * rng.normal(size=base.shape)
        return np.round(pixels, PIXEL_DECIMALS)

    def dialogue(self, topic: int, emotion: int, rng: np.random.Generator) -> list[int]:
        cfg, lay = self.cfg, self.layout
        tokens: list[int] = []
        n_turns = int(rng.integers(cfg.min_turns, cfg.max_turns + 1))
        for turn in range(n_turns):
            if turn:
                tokens.append(SEP_ID)
            for _ in range(int(rng.integers(cfg.min_utterance_len, cfg.max_utterance_len + 1))):
                u = rng.random()
                if u < cfg.topic_token_prob:
                    words = lay.topic_words(topic)
                elif u < cfg.topic_token_prob + cfg.emotion_token_prob:
                    c = emotion
                    if rng.random() < cfg.emotion_token_noise:
                        c = int(rng.integers(0, N_EMOTIONS))
                    words = lay.emotion_words(c)
                else:
                    words = lay.filler_words()
                tokens.append(int(words.start + rng.integers(0, len(words))))
        return tokens

    def _distractor_latent(self, topic: int, emotion: int, archetype: int, hard: bool, rng) -> tuple[int, int, int]:
        cfg = self.cfg
        if hard:
            mode = int(rng.integers(0, 3))  # 0: emotion differs, 1: intent differs, 2: both differ
            c, a = emotion, archetype
            if mode in (0, 2):
                c = (emotion + int(rng.integers(1, N_EMOTIONS))) % N_EMOTIONS
            if mode in (1, 2):
                a = (archetype + int(rng.integers(1, cfg.n_intent_archetypes))) % cfg.n_intent_archetypes
            return topic, c, a
        t = (topic + int(rng.integers(1, cfg.n_topics))) % cfg.n_topics
        return t, int(rng.integers(0, N_EMOTIONS)), int(rng.integers(0, cfg.n_intent_archetypes))

    def sample(self, sample_id: int) -> DialogueSample:
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, 1, sample_id])
        topic = int(rng.integers(0, cfg.n_topics))
        emotion = int(rng.integers(0, N_EMOTIONS))
        archetype = int(rng.integers(0, cfg.n_intent_archetypes))
        tokens = self.dialogue(topic, emotion, rng)
        n_neg = cfg.n_candidates - 1
        n_hard = int(round(cfg.hard_negative_fraction * n_neg))
        latents = [(topic, emotion, archetype)]
        latents += [self._distractor_latent(topic, emotion, archetype, i < n_hard, rng) for i in range(n_neg)]
        kinds = ["positive"] + ["hard"] * n_hard + ["easy"] * (n_neg - n_hard)
        images = [self.render(t, c, a, rng) for t, c, a in latents]
        order = rng.permutation(cfg.n_candidates)
        labels = np.zeros(cfg.n_candidates, dtype=np.int64)
        labels[int(np.argmax(order == 0))] = 1
        return DialogueSample(
            sample_id=sample_id,
            token_ids=tokens,
            e_t=self.lexicon(tokens),
            comet_sequences=self.comet.infer_all(archetype),
            candidates=np.stack([images[i] for i in order]),
            labels=labels,
            latent={
                "topic": topic,
                "emotion": emotion,
                "archetype": archetype,
                "candidates": [list(latents[i]) for i in order],
                "kinds": [kinds[i] for i in order],
            },
        )

    def generate(self) -> dict[str, list[DialogueSample]]:
        sizes = self.cfg.split_sizes()
        out: dict[str, list[DialogueSample]] = {}
        start = 0
        for split in SPLITS:
            out[split] = [self.sample(i) for i in range(start, start + sizes[split])]
            start += sizes[split]
        return out


def generate_corpus(cfg: GeneratorConfig, out_dir: str | Path | None = None) -> dict[str, list[DialogueSample]]:
    """Generate train/val/test splits; when ``out_dir`` is given, also write them plus a manifest."""
    splits = CorpusGenerator(cfg).generate()
    if out_dir is not None:
        write_corpus(splits, cfg, out_dir)
    return splits


# ------------------------------------------------------------------ file format
def write_dataset(samples: Iterable[DialogueSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record(), separators=(",", ":")))
            fh.write("\n")


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_corpus(splits: dict[str, list[DialogueSample]], cfg: GeneratorConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for split, samples in splits.items():
        path = out / f"{split}.jsonl"
        write_dataset(samples, path)
        files[split] = {"path": path.name, "n_samples": len(samples), "sha256": file_sha256(path)}
    manifest = {"generator_seed": cfg.seed, "config": cfg.to_dict(), "config_hash": cfg.config_hash(), "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


_REQUIRED = {
    "sample_id": int,
    "token_ids": list,
    "e_t": list,
    "comet": list,
    "pixel_shape": list,
    "candidates": list,
    "labels": list,
}


def _validate_record(rec, lineno: int, path: str) -> None:
    def fail(msg):
        raise DatasetFormatError(msg, line=lineno, path=path)

    if not isinstance(rec, dict):
        fail("record is not an object")
    for key, typ in _REQUIRED.items():
        if key not in rec:
            fail(f"missing field {key!r}")
        if not isinstance(rec[key], typ) or isinstance(rec[key], bool):
            fail(f"field {key!r} should be {typ.__name__}")
    labels = rec["labels"]
    if any(x not in (0, 1) for x in labels) or sum(labels) != 1:
        fail("labels must be binary with exactly one positive")
    if len(rec["candidates"]) != len(labels):
        fail("candidates and labels differ in length")
    if len(rec["e_t"]) != N_EMOTIONS or abs(sum(rec["e_t"]) - 1.0) > 1e-9 or min(rec["e_t"]) < 0:
        fail("e_t must be a 7-way probability distribution")
    if len(rec["comet"]) != len(RELATIONS) or any(not s for s in rec["comet"]):
        fail(f"comet must hold {len(RELATIONS)} nonempty sequences")
    size = int(np.prod(rec["pixel_shape"]))
    if any(len(c) != size for c in rec["candidates"]):
        fail("candidate pixel arrays do not match pixel_shape")
    if not all(isinstance(t, int) and t >= 0 for t in rec["token_ids"]):
        fail("token_ids must be nonnegative integers")


def load_dataset(path: str | Path) -> list[DialogueSample]:
    """Read and validate a newline-delimited dataset file."""
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"invalid JSON: {exc.msg}", line=lineno, path=str(path)) from None
            _validate_record(rec, lineno, str(path))
            samples.append(DialogueSample.from_record(rec))
    return samples


def load_corpus(data_dir: str | Path) -> dict[str, list[DialogueSample]]:
    d = Path(data_dir)
    return {split: load_dataset(d / f"{split}.jsonl") for split in SPLITS if (d / f"{split}.jsonl").exists()}


# ------------------------------------------------------------------ batching
@dataclass
class Batch:
    samples: list[DialogueSample]
    token_ids: list[list[int]]
    e_t: np.ndarray  # (B, 7)
    comet: list[list[list[int]]]
    pixels: np.ndarray  # (B, N, P, patch_dim)
    labels: np.ndarray  # (B, N)
    positive_index: np.ndarray  # (B,)

    def __len__(self) -> int:
        return len(self.samples)

    @classmethod
    def from_samples(cls, samples: Sequence[DialogueSample]) -> "Batch":
        if not samples:
            raise ValidationError("cannot build an empty batch")
        n = {s.candidates.shape for s in samples}
        if len(n) != 1:
            raise ValidationError(f"samples in a batch need identical candidate shapes, got {n}")
        return cls(
            samples=list(samples),
            token_ids=[s.token_ids for s in samples],
            e_t=np.stack([s.e_t for s in samples]),
            comet=[s.comet_sequences for s in samples],
            pixels=np.stack([s.candidates for s in samples]),
            labels=np.stack([s.labels for s in samples]).astype(np.float64),
            positive_index=np.array([s.positive_index for s in samples]),
        )


def make_batches(samples: Sequence[DialogueSample], size: int, order: Sequence[int] | None = None) -> Iterator[Batch]:
    """Consecutive batches of ``size`` (last one partial) in ``order``, default file order."""
    if size < 1:
        raise ValidationError("batch size must be at least 1")
    idx = list(range(len(samples))) if order is None else list(order)
    for start in range(0, len(idx), size):
        yield Batch.from_samples([samples[i] for i in idx[start : start + size]])


def make_batch(samples: Sequence[DialogueSample], size: int) -> list[Batch]:
    return list(make_batches(samples, size))
