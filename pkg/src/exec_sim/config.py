"""Experiment configuration: a single versioned JSON file.

Every section maps onto one of the package's config dataclasses. Unknown keys
are rejected and every validation failure names the dotted path of the field.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from .book import Side
from .cerl import Utility, make_utility
from .env import EnvConfig, ParentOrder
from .errors import ConfigError
from .flow import FlowConfig
from .search import HalvingConfig

SCHEMA_VERSION = 1
AGENTS = ("pov_baseline", "flat_cerl", "hierarchical", "random")
TOP_LEVEL = (
    "schema_version",
    "flow",
    "parent",
    "env",
    "utility",
    "agent",
    "seeds",
    "output_dir",
    "training",
    "search",
)


@dataclass(frozen=True)
class UtilitySpec:
    kind: str = "identity"
    lam: float = 1.0
    eta: float = 0.5

    def build(self) -> Utility:
        return make_utility(self.kind, lam=self.lam, eta=self.eta)


@dataclass(frozen=True)
class TrainingConfig:
    seed: int = 0
    flat_episodes: int = 6000
    local_episodes: int = 1500
    exploration: float = 0.5
    lr_power: float = 0.7
    lr_floor: float = 0.02
    passive_horizon: int = 10
    aggressive_horizon: int = 3


@dataclass(frozen=True)
class SearchConfig:
    seed: int = 0
    n_initial: int = 16
    eta: int = 4
    rungs: int = 3
    episodes_per_rung: tuple[int, ...] = (2, 4, 8)
    epoch_steps: int = 5

    def halving(self) -> HalvingConfig:
        return HalvingConfig(self.n_initial, self.eta, self.rungs, tuple(self.episodes_per_rung))


@dataclass(frozen=True)
class ExperimentConfig:
    flow: FlowConfig = field(default_factory=FlowConfig)
    parent: ParentOrder = field(default_factory=ParentOrder)
    env: EnvConfig = field(default_factory=EnvConfig)
    utility: UtilitySpec = field(default_factory=UtilitySpec)
    agent: str = "pov_baseline"
    seeds: tuple[int, ...] = tuple(range(100))
    output_dir: str = "out"
    training: TrainingConfig = field(default_factory=TrainingConfig)
    search: Optional[SearchConfig] = None
    source_sha256: str = ""


def _section(raw: Any, name: str, cls, convert: dict | None = None):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(name, "must be an object")
    allowed = {f.name for f in fields(cls)}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"{name}.{key}", f"unknown key {key!r}")
    values = {}
    for key, value in raw.items():
        expected = {f.name: f.type for f in fields(cls)}[key]
        if convert and key in convert:
            try:
                value = convert[key](value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{name}.{key}", str(exc)) from None
        elif isinstance(value, bool) or not _type_ok(value, str(expected)):
            raise ConfigError(f"{name}.{key}", f"expected {expected}, got {value!r}")
        values[key] = value
    try:
        return cls(**values)
    except ConfigError as exc:
        if exc.field.startswith(f"{name}."):
            raise
        raise ConfigError(f"{name}.{exc.field.split('.')[-1]}", str(exc).split(": ", 1)[-1]) from None


def _type_ok(value: Any, annotation: str) -> bool:
    if annotation == "int":
        return isinstance(value, int)
    if annotation == "float":
        return isinstance(value, (int, float))
    if annotation == "str":
        return isinstance(value, str)
    return True


def _size_dist(value):
    if not isinstance(value, list) or not all(isinstance(p, list) and len(p) == 2 for p in value):
        raise ValueError("expected a list of [size, probability] pairs")
    return tuple((int(s), float(p)) for s, p in value)


def _side(value):
    try:
        return Side(value)
    except ValueError:
        raise ValueError(f"side must be 'buy' or 'sell', got {value!r}") from None


def _int_list(value):
    if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise ValueError("expected a list of integers")
    return tuple(value)


def _seeds(raw: Any) -> tuple[int, ...]:
    if isinstance(raw, list):
        if not raw:
            raise ConfigError("seeds", "must not be empty")
        if not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in raw):
            raise ConfigError("seeds", "must be non-negative integers")
        return tuple(raw)
    if isinstance(raw, dict):
        for key in raw:
            if key not in ("base", "count"):
                raise ConfigError(f"seeds.{key}", f"unknown key {key!r}")
        base, count = raw.get("base", 0), raw.get("count")
        if not isinstance(base, int) or base < 0:
            raise ConfigError("seeds.base", "must be a non-negative integer")
        if not isinstance(count, int) or count < 1:
            raise ConfigError("seeds.count", "must be a positive integer")
        return tuple(range(base, base + count))
    raise ConfigError("seeds", "must be a list of seeds or {base, count}")


def parse_config(data: Any, source_sha256: str = "") -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    for key in data:
        if key not in TOP_LEVEL:
            raise ConfigError(key, f"unknown key {key!r}")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"expected {SCHEMA_VERSION}, got {version!r}")

    flow = _section(data.get("flow"), "flow", FlowConfig, {"size_dist": _size_dist})
    parent = _section(data.get("parent"), "parent", ParentOrder, {"side": _side})
    env = _section(data.get("env"), "env", EnvConfig)
    utility = _section(data.get("utility"), "utility", UtilitySpec)
    try:
        utility.build()
    except ValueError as exc:
        raise ConfigError("utility", str(exc)) from None

    agent = data.get("agent", "pov_baseline")
    if agent not in AGENTS:
        raise ConfigError("agent", f"must be one of {', '.join(AGENTS)}, got {agent!r}")
    seeds = _seeds(data.get("seeds", {"base": 0, "count": 100}))
    output_dir = data.get("output_dir", "out")
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError("output_dir", "must be a non-empty string")

    training = _section(data.get("training"), "training", TrainingConfig)
    for name in ("flat_episodes", "local_episodes", "passive_horizon", "aggressive_horizon"):
        if getattr(training, name) < (0 if name.endswith("episodes") else 1):
            raise ConfigError(f"training.{name}", "out of range")
    if not 0 <= training.exploration <= 1:
        raise ConfigError("training.exploration", "must lie in [0, 1]")

    search = None
    if "search" in data:
        search = _section(data["search"], "search", SearchConfig, {"episodes_per_rung": _int_list})
        search.halving()
        if search.epoch_steps < 0:
            raise ConfigError("search.epoch_steps", "must be >= 0 (0 = each option's own termination)")

    return ExperimentConfig(flow, parent, env, utility, agent, seeds, output_dir, training, search, source_sha256)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from None
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError("<parse>", f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_config(data, hashlib.sha256(raw).hexdigest())
