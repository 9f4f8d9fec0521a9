"""Run configuration: one hierarchical YAML file plus ``--set key=value`` overrides.

Unknown keys fail fast.  Every field has a default; ``dump_config`` writes the
fully resolved tree so a run can be replayed from its manifest alone.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .errors import ConfigError

MODES = ("business_only", "reward_sum", "adv_sum", "gate_only", "magnitude_only", "full")


@dataclass
class WorldSection:
    seed: int = 0
    n_users: int = 6000
    n_items: int = 512
    n_roots: int = 8
    n_subs_per_root: int = 8
    feature_dim: int = 16
    history_len_range: list = field(default_factory=lambda: [4, 8])
    n_context_tags: int = 0
    sid_levels: int = 3
    codebook_size: int = 8
    latent_weight_mode: str = "dirichlet"
    dirichlet_base: float = 0.5
    segment_boost: float = 3.0
    level_quota: list = field(default_factory=lambda: [0.12, 0.18, 0.30, 0.40])
    min_level_fraction: float = 0.10
    family_share: float = 0.6
    sub_spread: float = 0.6
    item_noise: float = 0.25
    profile_noise: float = 0.15
    target_temperature: float = 0.05
    popularity_scale: float = 1.0
    disallowed_root_fraction: float = 0.25
    dead_item_fraction: float = 0.3
    dead_item_bias: float = 0.0
    impulse_fraction: float = 0.0
    test_fraction: float = 0.2


@dataclass
class BusinessSection:
    mode: str = "graded"
    graded_same_sub: float = 0.3
    graded_same_root: float = 0.1


@dataclass
class JudgeSection:
    # chance that each aspect score is replaced by a random level
    noise: float = 0.0


@dataclass
class PolicySection:
    embed_dim: int = 32
    init_scale: float = 0.5
    optimizer: str = "adam"
    lr: float = 3e-3


@dataclass
class A2POSection:
    mode: str = "full"
    group_size: int = 16
    p: float = 1.0
    delta: float = 0.2
    beta_gen: float = 0.04
    epsilon: float = 1e-8
    std_guard: float = 1e-8
    alpha: float = 1.0
    batch_size: int = 64
    inner_epochs: int = 1
    steps: int = 1000
    eval_every: int = 250
    checkpoint_every: int = 250
    semantic_weights: str = "aggregator"  # aggregator | uniform | latent


@dataclass
class AggregatorSection:
    K: int = 4
    beta: float = 0.01
    group_size: int = 16
    lr: float = 0.05
    optimizer: str = "adam"
    steps: int = 800
    batch_size: int = 256
    pairs_per_context: int = 4
    behavioral_fraction: float = 0.5
    heldout_fraction: float = 0.2
    eval_every: int = 100


@dataclass
class PathsSection:
    world_dir: str = ""
    aggregator: str = ""


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    world: WorldSection = field(default_factory=WorldSection)
    business: BusinessSection = field(default_factory=BusinessSection)
    judge: JudgeSection = field(default_factory=JudgeSection)
    policy: PolicySection = field(default_factory=PolicySection)
    a2po: A2POSection = field(default_factory=A2POSection)
    aggregator: AggregatorSection = field(default_factory=AggregatorSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def validate(self) -> "RunConfig":
        if self.a2po.mode not in MODES:
            raise ConfigError(f"a2po.mode: unknown mode {self.a2po.mode!r}; expected one of {MODES}")
        if not 0.0 <= self.a2po.p <= 1.0:
            raise ConfigError(f"a2po.p: must lie in [0, 1], got {self.a2po.p}")
        if self.a2po.semantic_weights not in ("aggregator", "uniform", "latent"):
            raise ConfigError(f"a2po.semantic_weights: unknown value {self.a2po.semantic_weights!r}")
        if self.a2po.group_size < 2 or self.aggregator.group_size < 2:
            raise ConfigError("group sizes must be at least 2")
        if not 0.0 <= self.judge.noise <= 1.0:
            raise ConfigError("judge.noise must lie in [0, 1]")
        if not 0.0 < self.world.test_fraction < 1.0:
            raise ConfigError("world.test_fraction must lie in (0, 1)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{where}.{key}" if where else key
        if key not in known:
            raise ConfigError(f"unknown config key {path!r}")
        default = getattr(cls(), key)
        if is_dataclass(default):
            kwargs[key] = _build(type(default), value, path)
        else:
            kwargs[key] = _coerce(default, value, path)
    return cls(**kwargs)


def _coerce(default, value, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return list(value)
    return value


def _set_path(tree: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = tree
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {dotted!r}: {part!r} is not a section")
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def load_config(path=None, overrides=()) -> RunConfig:
    tree: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        loaded = yaml.safe_load(p.read_text())
        if loaded is not None:
            if not isinstance(loaded, dict):
                raise ConfigError(f"{p}: top level must be a mapping")
            tree = loaded
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        _set_path(tree, key, value)
    try:
        return _build(RunConfig, tree, "").validate()
    except ConfigError as exc:
        if path is not None:
            raise ConfigError(f"{path}: {exc}") from None
        raise


def config_from_dict(tree: dict) -> RunConfig:
    return _build(RunConfig, tree, "").validate()


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
