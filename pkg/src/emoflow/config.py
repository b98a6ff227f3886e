"""Configuration file loading (JSON)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .backends.client import BackendProfile
from .backends.mock import MockScript
from .editing import ToolRegistry, default_registry
from .knowledge import ClusterParams
from .orchestrator import RunConfig


@dataclass
class Config:
    profiles: dict[str, BackendProfile] = field(default_factory=lambda: {"mock": BackendProfile()})
    mock_script: MockScript | None = None
    knowledge_base: Path | None = None
    store_dir: Path | None = None
    run: RunConfig = field(default_factory=RunConfig)
    cluster: ClusterParams = field(default_factory=ClusterParams)
    registry: ToolRegistry = field(default_factory=default_registry)

    def profile(self, name: str) -> BackendProfile:
        try:
            return self.profiles[name]
        except KeyError:
            raise KeyError(f"unknown backend profile {name!r}; known: {sorted(self.profiles)}") from None


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    path = Path(path)
    data: dict[str, Any] = json.loads(path.read_text(encoding="utf-8"))
    base = path.parent

    def rel(p: str | None) -> Path | None:
        return None if p is None else (base / p if not Path(p).is_absolute() else Path(p))

    profiles = {"mock": BackendProfile()}
    for name, raw in data.get("profiles", {}).items():
        profiles[name] = BackendProfile.from_json(name, raw)
    script = data.get("mock_script")
    if isinstance(script, str):
        script = MockScript.load(rel(script))
    elif isinstance(script, dict):
        script = MockScript.from_json(script)
    registry = ToolRegistry.from_json(data["registry"]) if "registry" in data else default_registry()
    return Config(
        profiles=profiles,
        mock_script=script,
        knowledge_base=rel(data.get("knowledge_base")),
        store_dir=rel(data.get("store_dir")),
        run=RunConfig(**data.get("run", {})),
        cluster=ClusterParams(**data.get("cluster", {})),
        registry=registry,
    )
