"""Run configuration: one YAML file, dotted ``--set`` overrides, validated into typed sections."""

from __future__ import annotations

import copy
import dataclasses
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .catalog import CatalogConfig
from .datasets import DataConfig
from .evaluation import EvalConfig
from .grpo import RlConfig
from .rewards import RewardConfig
from .sft import SftConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EngineSection:
    k: int = 10
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass(frozen=True)
class SftSection:
    lam: float = 1.0
    learning_rate: float = 0.05
    epochs: int = 20
    batch_size: int = 64
    momentum: float = 0.9
    optimizer: str = "sgd"
    clip_norm: float | None = 5.0
    hidden_size: int = 64
    init_scale: float = 0.5
    multitask: bool = True
    checkpoint_every: int = 5


@dataclass(frozen=True)
class RlSection:
    beam_size: int = 10
    epsilon: float = 0.2
    beta: float = 0.4
    learning_rate: float = 0.05
    steps: int = 80
    batch_size: int = 16
    sigma_floor: float = 1e-8
    reward_kind: str = "fusion"
    max_len: int = 16
    sampling: str = "beam"
    optimizer: str = "sgd"
    momentum: float = 0.0
    clip_norm: float | None = 5.0
    checkpoint_every: int = 20


@dataclass(frozen=True)
class DpoSection:
    beta: float = 0.1
    learning_rate: float = 0.05
    epochs: int = 5
    batch_size: int = 32
    n_candidates: int = 10
    n_negatives: int = 2
    bottom: int = 5


@dataclass(frozen=True)
class ServeSection:
    ttl_seconds: float = 14 * 24 * 3600.0
    top_k: int = 3


@dataclass(frozen=True)
class CatalogSection:
    n_brands: int = 8
    n_modifiers: int = 6
    n_categories: int = 10
    synonym_fraction: float = 0.5


@dataclass(frozen=True)
class RunConfig:
    run_dir: str
    seed: int = 0
    catalog: CatalogSection = field(default_factory=CatalogSection)
    engine: EngineSection = field(default_factory=EngineSection)
    data: DataConfig = field(default_factory=DataConfig)
    sft: SftSection = field(default_factory=SftSection)
    rl: RlSection = field(default_factory=RlSection)
    reward: RewardConfig = field(default_factory=RewardConfig)
    dpo: DpoSection = field(default_factory=DpoSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    serve: ServeSection = field(default_factory=ServeSection)

    # -- derived configs -----------------------------------------------------
    def stream(self, name: str) -> int:
        """Seed of a named random sub-stream (catalog, clicks, training, dpo-negatives, ...)."""
        return int(np.random.SeedSequence([self.seed, zlib.crc32(name.encode())]).generate_state(1)[0])

    def catalog_config(self) -> CatalogConfig:
        return CatalogConfig(**dataclasses.asdict(self.catalog), seed=self.stream("catalog"))

    def sft_config(self) -> SftConfig:
        s = self.sft
        return SftConfig(
            lam=s.lam if s.multitask else 0.0, learning_rate=s.learning_rate, epochs=s.epochs,
            batch_size=s.batch_size, seed=self.stream("training"), momentum=s.momentum,
            optimizer=s.optimizer, clip_norm=s.clip_norm,
        )

    def rl_config(self, **overrides) -> RlConfig:
        kw = {f.name: getattr(self.rl, f.name) for f in dataclasses.fields(RlConfig) if hasattr(self.rl, f.name)}
        kw["seed"] = self.stream("rl")
        kw.update(overrides)
        return RlConfig(**kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(value, current, name: str):
    """Match the type of the default for scalars; tuples come in as YAML lists."""
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        return tuple(value)
    if isinstance(current, int) and not isinstance(value, bool) and isinstance(value, int):
        return value
    if isinstance(current, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if current is None or value is None:
        return value
    if type(value) is not type(current):
        raise ConfigError(f"{name}: expected {type(current).__name__}, got {value!r}")
    return value


def _build_section(cls, raw, name: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected a mapping")
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config field: {name}.{unknown[0]}")
    kw = {k: _coerce(v, getattr(defaults, k), f"{name}.{k}") for k, v in raw.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config field: {unknown[0]}")
    if "run_dir" not in raw or raw["run_dir"] in (None, ""):
        raise ConfigError("missing config field: run_dir")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed: expected a non-negative integer")
    kw = {"run_dir": str(raw["run_dir"]), "seed": seed}
    for name, f in _SECTIONS.items():
        if name in ("run_dir", "seed"):
            continue
        kw[name] = _build_section(f.default_factory().__class__, raw.get(name), name)
    cfg = RunConfig(**kw)
    # the derived configs carry the range checks
    for name, build in (("catalog", lambda: cfg.catalog_config().validate()), ("sft", cfg.sft_config),
                        ("rl", cfg.rl_config)):
        try:
            build()
        except ValueError as exc:
            raise ConfigError(f"{name}: {exc}") from exc
    return cfg


def apply_overrides(raw: dict, overrides) -> dict:
    """``a.b=value`` pairs; values are parsed as YAML scalars."""
    raw = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value: {item!r}")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {key}: {p} is not a section")
        node[parts[-1]] = yaml.safe_load(text)
    return raw


def load_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: not valid YAML ({exc})") from exc
    raw = apply_overrides(raw, overrides)
    if seed is not None:
        raw["seed"] = seed
    cfg = from_dict(raw)
    if path is not None and not Path(cfg.run_dir).is_absolute():
        cfg = dataclasses.replace(cfg, run_dir=str(Path(path).resolve().parent / cfg.run_dir))
    return cfg


def dump_config(cfg: RunConfig) -> str:
    def plain(x):
        if isinstance(x, tuple):
            return [plain(v) for v in x]
        if isinstance(x, dict):
            return {k: plain(v) for k, v in x.items()}
        return x

    return yaml.safe_dump(plain(cfg.to_dict()), sort_keys=True)
