"""Run configuration, loadable from a JSON file."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Any

from .grpo import GrpoConfig
from .rollout import RolloutLimits, ToolcallerBudget


@dataclass
class PolicyEndpoint:
    # heuristic | scripted | http
    kind: str = "heuristic"
    model: str = ""
    url: str | None = None
    temperature: float = 1.0
    max_tokens: int = 1024
    script: str | None = None


@dataclass
class SearchBackend:
    # fixture | http
    kind: str = "fixture"
    corpus: str | None = None
    url: str | None = None
    cache_dir: str | None = None
    replay: bool = False


@dataclass
class EngineConfig:
    mode: str = "hierarchical"
    limits: RolloutLimits = field(default_factory=RolloutLimits)
    toolcaller: ToolcallerBudget = field(default_factory=ToolcallerBudget)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    planner: PolicyEndpoint = field(default_factory=PolicyEndpoint)
    toolcaller_agent: PolicyEndpoint = field(default_factory=PolicyEndpoint)
    search: SearchBackend = field(default_factory=SearchBackend)
    concurrency: int = 4
    cem_mode: str = "token"
    seed: int = 0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def fingerprint(self, **extra: Any) -> str:
        blob = json.dumps({"config": self.to_dict(), **extra}, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _merge(obj, updates: dict[str, Any], where: str = ""):
    for key, value in updates.items():
        if not any(f.name == key for f in dataclasses.fields(obj)):
            raise KeyError(f"unknown config key {where}{key}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise TypeError(f"config key {where}{key} expects a table")
            _merge(current, value, f"{where}{key}.")
            if hasattr(current, "__post_init__"):
                current.__post_init__()
        else:
            setattr(obj, key, value)
    return obj


def load_config(path: str | None = None, overrides: dict[str, Any] | None = None) -> EngineConfig:
    cfg = EngineConfig()
    if path:
        with open(path, encoding="utf-8") as fh:
            _merge(cfg, json.load(fh))
    if overrides:
        _merge(cfg, overrides)
    return cfg
