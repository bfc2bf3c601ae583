"""Inference-time slate ranking and ranking metrics (MAP, R@K), plus cluster-separation ratios."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .data import DialogueSample, make_batches
from .errors import ValidationError

RATIO_CAP = 1e6
K_VALUES = (1, 2, 5)


@dataclass
class RankedSlate:
    sample_id: int
    scores: list[float]
    ranking: list[int]  # candidate indices, best first
    positive_index: int

    @classmethod
    def from_scores(cls, sample_id: int, scores: Sequence[float], labels: Sequence[int]) -> "RankedSlate":
        labels = list(labels)
        if sum(1 for x in labels if x) != 1:
            raise ValidationError(f"slate {sample_id} must have exactly one positive, got {sum(labels)}")
        s = np.asarray(scores, dtype=np.float64)
        # stable sort on -score keeps ascending index order among ties
        ranking = np.argsort(-s, kind="stable")
        return cls(sample_id, [float(x) for x in s], [int(i) for i in ranking], labels.index(1))

    @property
    def rank(self) -> int:
        """1-based rank of the positive candidate."""
        return self.ranking.index(self.positive_index) + 1


@dataclass
class MetricsReport:
    map: float
    r_at_1: float
    r_at_2: float
    r_at_5: float
    mean_positive_score: float
    n_samples: int

    def as_percent_row(self) -> str:
        return (f"{100 * self.map:.1f}\t{100 * self.r_at_1:.1f}\t{100 * self.r_at_2:.1f}\t"
                f"{100 * self.r_at_5:.1f}")

    def table(self) -> str:
        return ("MAP\tR10@1\tR10@2\tR10@5\n" + self.as_percent_row())

    def to_dict(self) -> dict:
        return asdict(self)


def average_precision(slate: RankedSlate) -> float:
    """AP for a single relevant item, i.e. 1 / rank of the positive."""
    return 1.0 / slate.rank


def mean_average_precision(slates: Sequence[RankedSlate]) -> float:
    if not slates:
        raise ValidationError("need at least one slate")
    return float(np.mean([average_precision(s) for s in slates]))


def recall_at_k(slates: Sequence[RankedSlate], k: int) -> float:
    if not slates:
        raise ValidationError("need at least one slate")
    for s in slates:
        if k > len(s.scores):
            raise ValidationError(f"k={k} exceeds slate size {len(s.scores)}")
    return float(np.mean([s.rank <= k for s in slates]))


def report_from_slates(slates: Sequence[RankedSlate]) -> MetricsReport:
    return MetricsReport(
        map=mean_average_precision(slates),
        r_at_1=recall_at_k(slates, 1),
        r_at_2=recall_at_k(slates, 2),
        r_at_5=recall_at_k(slates, 5),
        mean_positive_score=float(np.mean([s.scores[s.positive_index] for s in slates])),
        n_samples=len(slates),
    )


def score_slates(model, samples: Sequence[DialogueSample], batch_size: int = 50) -> list[RankedSlate]:
    """Rank every sample's candidates by inference-mode p_final."""
    slates = []
    for batch in make_batches(samples, batch_size):
        scores = model.score(batch)
        for s, row in zip(batch.samples, scores):
            slates.append(RankedSlate.from_scores(s.sample_id, row, s.labels))
    return slates


def score_slate(model, sample: DialogueSample) -> RankedSlate:
    return score_slates(model, [sample])[0]


def evaluate(model, samples: Sequence[DialogueSample], batch_size: int = 50) -> MetricsReport:
    return report_from_slates(score_slates(model, samples, batch_size))


def inter_intra_ratio(embeddings, labels) -> float:
    """Mean pairwise centroid distance divided by mean distance of points to their centroid.

    Perfectly tight clusters give an infinite ratio, reported as ``RATIO_CAP``.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    if classes.size < 2:
        raise ValidationError("need at least two classes")
    centroids, within = [], []
    for c in classes:
        pts = x[y == c]
        if len(pts) < 2:
            raise ValidationError(f"class {c!r} has fewer than two points")
        mu = pts.mean(axis=0)
        centroids.append(mu)
        within.extend(np.linalg.norm(pts - mu, axis=1))
    cen = np.stack(centroids)
    iu = np.triu_indices(len(cen), k=1)
    between = np.linalg.norm(cen[:, None, :] - cen[None, :, :], axis=-1)[iu].mean()
    intra = float(np.mean(within))
    if intra <= between / RATIO_CAP:
        return RATIO_CAP
    return float(between / intra)


def uniform_map_baseline(n_candidates: int = 10) -> float:
    """Expected MAP of a uniformly random ranking: H_n / n."""
    return sum(1.0 / k for k in range(1, n_candidates + 1)) / n_candidates
