"""Resolved run configuration: defaults, then a key-value file, then command-line overrides."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .alignment import AlignmentWeights
from .data import GeneratorConfig
from .encoders import EncoderConfig
from .errors import ConfigError
from .model import AblationSpec, ModelConfig
from .trainer import TrainConfig


@dataclass
class Paths:
    data_dir: str = "data"
    checkpoint_dir: str = "runs/checkpoints"
    log_dir: str = "runs/logs"


@dataclass
class ModelExtras:
    eta: float = 0.1
    n_refine: int = 3
    sd_prob: float = 0.1
    view_dropout: float = 0.1


SECTIONS: dict[str, type] = {
    "data": GeneratorConfig,
    "encoder": EncoderConfig,
    "weights": AlignmentWeights,
    "model": ModelExtras,
    "train": TrainConfig,
    "ablation": AblationSpec,
    "paths": Paths,
}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _coerce(raw: Any, annotation, key: str):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    ann = str(annotation)
    optional = "None" in ann
    if optional and text.lower() in ("none", "null", ""):
        return None
    try:
        if "bool" in ann:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if "int" in ann and "float" not in ann:
            return int(text)
        if "float" in ann:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {ann}") from None
    return text


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``section.key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"{source}:{lineno}: key {key!r} needs a section prefix")
        out[key] = value
    return out


@dataclass
class RunConfig:
    data: GeneratorConfig = field(default_factory=GeneratorConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    weights: AlignmentWeights = field(default_factory=AlignmentWeights)
    model: ModelExtras = field(default_factory=ModelExtras)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationSpec = field(default_factory=AblationSpec)
    paths: Paths = field(default_factory=Paths)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def model_config(self) -> ModelConfig:
        return ModelConfig(encoder=self.encoder, weights=self.weights, **dataclasses.asdict(self.model))

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """New config with dotted-key overrides applied and every section re-validated."""
        current = self.to_dict()
        for key, raw in overrides.items():
            section, _, name = key.partition(".")
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section {section!r} in {key!r}")
            hints = typing.get_type_hints(SECTIONS[section])
            names = {f.name for f in dataclasses.fields(SECTIONS[section])}
            if name not in names:
                raise ConfigError(f"unknown config key {key!r}")
            current[section][name] = _coerce(raw, hints[name], key)
        try:
            return RunConfig(**{s: cls(**current[s]) for s, cls in SECTIONS.items()})
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    def hash(self) -> str:
        import hashlib

        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def resolve(config_file: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Defaults < file < explicit overrides."""
    cfg = RunConfig()
    if config_file is not None:
        path = Path(config_file)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config file {path}: {exc.strerror}") from exc
        cfg = cfg.with_overrides(parse_kv(text, str(path)))
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg


def dump_kv(cfg: RunConfig) -> str:
    lines = []
    for section, values in cfg.to_dict().items():
        for k, v in values.items():
            lines.append(f"{section}.{k} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"


def write_manifest(path: str | Path, cfg: RunConfig, command: str, inputs: Iterable[str | Path] = (),
                   extra: Mapping[str, Any] | None = None) -> Path:
    """Record the resolved config and content hashes of the inputs a run consumed."""
    from .data import file_sha256

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "inputs": {str(p): file_sha256(p) for p in inputs if Path(p).is_file()},
        **(extra or {}),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
