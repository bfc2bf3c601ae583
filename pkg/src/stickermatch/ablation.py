"""Train-and-evaluate harness over ablation flag combinations."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import DialogueSample
from .evaluator import MetricsReport
from .model import PRESETS, AblationSpec, ModelConfig
from .trainer import TrainConfig, Trainer


@dataclass
class AblationRecord:
    name: str
    spec: AblationSpec
    seed: int
    report: MetricsReport

    def to_dict(self) -> dict:
        return {"name": self.name, "key": self.spec.key(), "flags": self.spec.to_dict(), "seed": self.seed,
                **self.report.to_dict()}


def resolve_preset(name: str) -> dict[str, AblationSpec]:
    try:
        return dict(PRESETS[name])
    except KeyError:
        raise KeyError(f"unknown ablation preset {name!r}; choose from {sorted(PRESETS)}") from None


def run_ablation(specs: Mapping[str, AblationSpec], train: Sequence[DialogueSample],
                 test: Sequence[DialogueSample], model_cfg: ModelConfig, train_cfg: TrainConfig,
                 seeds: Sequence[int] | None = None, records_path: str | Path | None = None,
                 progress=None) -> list[AblationRecord]:
    """Train every configuration from the same seed(s) on the same data and evaluate on ``test``.

    Records are appended to ``records_path`` as JSON lines keyed by the flag vector.
    """
    seeds = [train_cfg.seed] if seeds is None else list(seeds)
    records = []
    for seed in seeds:
        cfg = TrainConfig(**{**train_cfg.to_dict(), "seed": seed})
        for name, spec in specs.items():
            trainer = Trainer(model_cfg, cfg, spec).fit(train)
            rec = AblationRecord(name, spec, seed, trainer.evaluate(test))
            records.append(rec)
            if records_path:
                with open(records_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec.to_dict()) + "\n")
            if progress:
                progress(rec)
    return records


def summarize(records: Sequence[AblationRecord]) -> dict[str, dict[str, float]]:
    """Seed-averaged metrics per configuration name."""
    out: dict[str, dict[str, float]] = {}
    for name in dict.fromkeys(r.name for r in records):
        rs = [r.report for r in records if r.name == name]
        out[name] = {
            "map": float(np.mean([r.map for r in rs])),
            "r_at_1": float(np.mean([r.r_at_1 for r in rs])),
            "r_at_2": float(np.mean([r.r_at_2 for r in rs])),
            "r_at_5": float(np.mean([r.r_at_5 for r in rs])),
            "mean_positive_score": float(np.mean([r.mean_positive_score for r in rs])),
            "n_runs": len(rs),
        }
    return out
