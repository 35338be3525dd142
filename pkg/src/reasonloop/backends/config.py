"""Backend config files.

::

    {"mode": "live",
     "reasoner":  {"endpoint": ..., "model": ..., "api_key_env": "MY_KEY_VAR",
                   "retry_budget": 2, "timeout_ms": 60000},
     "generator": {"endpoint": ..., "model": ..., "api_key_env": ..., ...}}

    {"mode": "simulated", "world": {"flaw_probability": 0.5, ...},
     "editors": [{"name": "ed0"}, {"name": "broken", "correction_probability": 0.0}]}

    {"mode": "scripted", "reasoner": {"script": {...}}, "generator": {"script": {...}}}

API keys are read from the environment variable named by ``api_key_env``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from ..images import ImageStore
from .base import GeneratorBackend, ReasonerBackend, RetryPolicy
from .http import HTTPGenerator, HTTPReasoner
from .scripted import ScriptedGenerator, ScriptedReasoner
from .world import SimulatedWorld, WorldConfig

MODES = ("live", "scripted", "simulated")

# four regular editors plus one that can never repair its flaws
DEFAULT_SIMULATED_EDITORS = (
    {"name": "editor-a"},
    {"name": "editor-b"},
    {"name": "editor-c"},
    {"name": "editor-d"},
    {"name": "editor-broken", "correction_probability": 0.0},
)


class ConfigError(ValueError):
    pass


@dataclass
class Backends:
    reasoner: ReasonerBackend
    generator: GeneratorBackend
    store: ImageStore
    editors: list[GeneratorBackend] = field(default_factory=list)
    world: SimulatedWorld | None = None


def load_backend_config(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"backend config not found: {path}")
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"backend config {path} is not valid JSON: {exc}") from None
    return validate_backend_config(cfg)


def validate_backend_config(cfg: Any) -> dict:
    if not isinstance(cfg, dict):
        raise ConfigError("backend config must be a JSON object")
    mode = cfg.get("mode")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "live":
        for role in ("reasoner", "generator"):
            section = cfg.get(role)
            if not isinstance(section, dict) or not section.get("endpoint") or not section.get("model"):
                raise ConfigError(f"live mode needs {role}.endpoint and {role}.model")
    return cfg


def _world_config(section: dict | None, base: WorldConfig | None = None) -> WorldConfig:
    section = {k: v for k, v in (section or {}).items() if k != "name"}
    try:
        return replace(base, **section) if base else WorldConfig(**section)
    except TypeError as exc:
        raise ConfigError(f"bad world config: {exc}") from None


def _live(section: dict, store: ImageStore, cls):
    retry = RetryPolicy(
        retry_budget=int(section.get("retry_budget", 2)),
        backoff_ms=tuple(section.get("backoff_ms", RetryPolicy().backoff_ms)),
    )
    return cls(
        endpoint=section["endpoint"],
        model=section["model"],
        store=store,
        api_key_env=section.get("api_key_env"),
        retry=retry,
        timeout_ms=int(section.get("timeout_ms", 60_000)),
    )


def build_backends(cfg: dict | None, store: ImageStore, seed: int = 0) -> Backends:
    """Instantiate backends from a validated config (``None`` = default simulated world)."""
    cfg = validate_backend_config(cfg if cfg is not None else {"mode": "simulated"})
    mode = cfg["mode"]
    if mode == "simulated":
        world = SimulatedWorld(_world_config(cfg.get("world")), seed=int(cfg.get("seed", seed)), store=store)
        editors = [
            world.generator(_world_config(e, world.config), name=e.get("name", f"editor-{i}"))
            for i, e in enumerate(cfg.get("editors", DEFAULT_SIMULATED_EDITORS))
        ]
        return Backends(world.reasoner(), world.generator(), store, editors, world)
    if mode == "scripted":
        reasoner = ScriptedReasoner(cfg.get("reasoner", {}).get("script", {}))
        generator = ScriptedGenerator(store, cfg.get("generator", {}).get("script", {}))
        return Backends(reasoner, generator, store, [generator])
    reasoner = _live(cfg["reasoner"], store, HTTPReasoner)
    generator = _live(cfg["generator"], store, HTTPGenerator)
    editors = [_live(e, store, HTTPGenerator) for e in cfg.get("editors", [])] or [generator]
    return Backends(reasoner, generator, store, editors)
