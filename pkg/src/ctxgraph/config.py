"""Run configuration: one JSON file per run, unknown keys rejected at every level."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .kgc import KgcParams
from .kge.training import TrainConfig
from .kgqa import QaParams


class ConfigError(ValueError):
    pass


def _build(cls, data: Any, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; allowed: {sorted(known)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class Paths:
    graph_dir: str | None = None
    entity_dump: str | None = None
    mapping: str | None = None
    checkpoint: str | None = None
    script: str | None = None
    qa_dataset: str | None = None

    def resolve(self, base: Path) -> "Paths":
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = str((base / v).resolve()) if v else v
        return Paths(**out)

    def require(self, name: str) -> Path:
        v = getattr(self, name)
        if not v:
            raise ConfigError(f"paths.{name} is required for this command")
        p = Path(v)
        if not p.exists():
            raise ConfigError(f"paths.{name}: {p} does not exist")
        return p


@dataclass
class BackendConfig:
    kind: str = "scripted"
    default_reply: str | None = None
    endpoint: str | None = None
    model: str | None = None
    max_tokens: int = 256
    temperature: float = 0.0
    api_key_env: str = "CTXGRAPH_LLM_API_KEY"
    max_in_flight: int = 4
    requests_per_second: float | None = None

    def __post_init__(self):
        if self.kind not in ("scripted", "http"):
            raise ValueError("backend.kind must be 'scripted' or 'http'")
        if self.kind == "http" and not (self.endpoint and self.model):
            raise ValueError("the http backend needs endpoint and model")


@dataclass
class ScorerConfig:
    kind: str = "lexical"
    endpoint: str | None = None
    model: str | None = None
    api_key_env: str = "CTXGRAPH_EMBED_API_KEY"

    def __post_init__(self):
        if self.kind not in ("lexical", "remote"):
            raise ValueError("scorer.kind must be 'lexical' or 'remote'")
        if self.kind == "remote" and not self.endpoint:
            raise ValueError("the remote scorer needs an endpoint")


@dataclass
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    train: TrainConfig = field(default_factory=TrainConfig)
    kgc: KgcParams = field(default_factory=KgcParams)
    qa: QaParams = field(default_factory=QaParams)
    backend: BackendConfig = field(default_factory=BackendConfig)
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    seed: int = 0
    split: str = "test"
    limit: int | None = None

    def __post_init__(self):
        if self.split not in ("train", "valid", "test"):
            raise ConfigError("split must be train, valid or test")
        if self.limit is not None and self.limit < 1:
            raise ConfigError("limit must be >= 1")

    @classmethod
    def from_dict(cls, data: dict, base: Path | None = None) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config root must be an object")
        sections = {"paths": Paths, "train": TrainConfig, "kgc": KgcParams, "qa": QaParams,
                    "backend": BackendConfig, "scorer": ScorerConfig}
        scalars = {"seed", "split", "limit"}
        unknown = sorted(set(data) - set(sections) - scalars)
        if unknown:
            raise ConfigError(f"unknown top-level keys {unknown}; allowed: {sorted(set(sections) | scalars)}")
        built = {k: _build(c, data.get(k), k) for k, c in sections.items()}
        if base is not None:
            built["paths"] = built["paths"].resolve(base)
        try:
            return cls(**built, **{k: data[k] for k in scalars if k in data})
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data, base=path.parent)

    def to_dict(self) -> dict:
        return {
            "paths": asdict(self.paths), "train": self.train.to_dict(), "kgc": self.kgc.to_dict(),
            "qa": self.qa.to_dict(), "backend": asdict(self.backend), "scorer": asdict(self.scorer),
            "seed": self.seed, "split": self.split, "limit": self.limit,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
