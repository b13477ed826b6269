"""Run configuration: one YAML file with a versioned schema, one dataclass per section."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .attack import AttackConfig
from .checkpoint import config_hash
from .distill import DistillConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class WorldSection:
    seed: int = 0
    n_entities: int = 2400


@dataclass
class LmSection:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_len: int = 256
    # phase 1: one document followed by several of its questions
    read_steps: int = 1200
    read_qa: int = 6
    # phase 2: BM25 top-k episodes in rank order (k from the retrieval section)
    rag_steps: int = 900
    ctx_weight: float = 0.1
    chunk_entities: int = 120
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0


@dataclass
class EncoderSection:
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 512
    steps: int = 1500
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0


@dataclass
class GeneratorSection:
    rank: int = 2
    alpha: float = 32.0
    n_heads: int = 4
    depth: int = 2
    d_ff: int = 512
    a_init_std: float = 0.02


@dataclass
class RetrievalSection:
    k: int = 3
    k1: float = 1.2
    b: float = 0.75


@dataclass
class EvalSection:
    n_questions: int = 200
    seed: int = 1
    max_new_tokens: int = 6
    prag_steps: int = 40
    prag_lr: float = 5e-3


@dataclass
class AttackSection(AttackConfig):
    test_fraction: float = 0.003
    min_test: int = 20

    def decoder_config(self) -> AttackConfig:
        return AttackConfig(**{f.name: getattr(self, f.name) for f in fields(AttackConfig)})


@dataclass
class OverlapSection:
    n_perm: int = 512
    lsh_bands: int = 64
    seed: int = 1


SECTIONS: dict[str, type] = {
    "world": WorldSection,
    "lm": LmSection,
    "encoder": EncoderSection,
    "generator": GeneratorSection,
    "distill": DistillConfig,
    "retrieval": RetrievalSection,
    "eval": EvalSection,
    "attack": AttackSection,
    "overlap": OverlapSection,
}


@dataclass
class RunConfig:
    world: WorldSection = field(default_factory=WorldSection)
    lm: LmSection = field(default_factory=LmSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    distill: DistillConfig = field(default_factory=DistillConfig)
    retrieval: RetrievalSection = field(default_factory=RetrievalSection)
    eval: EvalSection = field(default_factory=EvalSection)
    attack: AttackSection = field(default_factory=AttackSection)
    overlap: OverlapSection = field(default_factory=OverlapSection)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def section_hash(self, name: str) -> str:
        return config_hash(asdict(getattr(self, name)))

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def hashes(self) -> dict[str, str]:
        return {name: self.section_hash(name) for name in SECTIONS}

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def from_dict(raw: dict[str, Any]) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    raw = dict(raw)
    version = raw.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version} (expected {SCHEMA_VERSION})")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    built = {}
    for name, cls in SECTIONS.items():
        body = raw.get(name) or {}
        if not isinstance(body, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        allowed = {f.name for f in fields(cls)}
        bad = set(body) - allowed
        if bad:
            raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
        try:
            built[name] = cls(**body)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {name!r} section: {exc}") from exc
    return RunConfig(**built, schema_version=SCHEMA_VERSION)


def load(path: str | Path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return from_dict(raw or {})
