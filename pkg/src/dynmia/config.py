"""Experiment configuration: flat ``key.path = value`` files, fingerprints and stage seeds.

Example::

    # comments start with '#'
    dataset = synthetic-2class
    seed = 0
    split.n_target_train = 400
    model.widths = [16, 32, 64]
    target.epochs = 20
    shadow.mode = ft-main

Values are parsed as JSON when possible (numbers, booleans, lists, null)
and kept as bare strings otherwise.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .attack import AttackTrainConfig
from .defense import DefenseConfig
from .errors import InvalidSpec
from .models import ModelConfig
from .trainers import FINETUNE_MODES, TrainConfig


@dataclass(frozen=True)
class SplitCounts:
    n_target_train: int = 500
    n_target_test: int = 500
    n_shadow_train: int = 500
    n_shadow_test: int = 500
    overlap_fraction: float = 0.0
    n_reference: int = 0


@dataclass(frozen=True)
class ShadowSettings:
    mode: str = "ft-main"
    epoch_fraction: float = 0.25


@dataclass(frozen=True)
class FeatureFlags:
    with_gradients: bool = False
    with_activations: bool = False


@dataclass(frozen=True)
class SyntheticSettings:
    """Generator settings, used only for ``synthetic-<k>class`` datasets."""

    n: int = 2000
    separation: float = 2.0


@dataclass(frozen=True)
class RunSettings:
    """Which optional experiments ``run-all`` adds to the core attack."""

    baseline: bool = True
    comparative: bool = False
    defense: bool = False
    figure: str = "comparison.png"


_SECTIONS = {
    "split": SplitCounts,
    "model": ModelConfig,
    "target": TrainConfig,
    "shadow": ShadowSettings,
    "attack": AttackTrainConfig,
    "defense": DefenseConfig,
    "features": FeatureFlags,
    "run": RunSettings,
    "synthetic": SyntheticSettings,
}
_TUPLE_FIELDS = {("model", "widths"), ("model", "policy_widths"), ("model", "gated_stages"),
                 ("attack", "hidden"), ("defense", "hidden")}
# per-stage seeds come from the global seed, so these keys are not user-settable
_DERIVED = {("model", "seed"), ("target", "seed"), ("attack", "seed"), ("defense", "seed")}
# paths do not change results and stay out of the fingerprint
_UNHASHED = {"out", "data_root"}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "synthetic-2class"
    seed: int = 0
    out: str = "runs"
    data_root: str | None = None
    split: SplitCounts = field(default_factory=SplitCounts)
    model: ModelConfig = field(default_factory=ModelConfig)
    target: TrainConfig = field(default_factory=TrainConfig)
    shadow: ShadowSettings = field(default_factory=ShadowSettings)
    attack: AttackTrainConfig = field(default_factory=AttackTrainConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    features: FeatureFlags = field(default_factory=FeatureFlags)
    run: RunSettings = field(default_factory=RunSettings)
    synthetic: SyntheticSettings = field(default_factory=SyntheticSettings)

    def validate(self) -> None:
        if self.shadow.mode not in FINETUNE_MODES:
            raise InvalidSpec(f"shadow.mode must be one of {FINETUNE_MODES}")
        if not 0 < self.shadow.epoch_fraction <= 1:
            raise InvalidSpec("shadow.epoch_fraction must lie in (0, 1]")
        self.target.validate()
        self.attack.validate()
        self.defense.validate()
        self.model.resolved_gate_dim()
        if self.run.comparative and not (self.features.with_gradients and self.features.with_activations):
            raise InvalidSpec("run.comparative needs features.with_gradients and features.with_activations")
        if self.run.defense and self.split.n_reference < 1:
            raise InvalidSpec("run.defense needs split.n_reference > 0")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @property
    def fingerprint(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def stage_seed(self, tag: str) -> int:
        """Global seed fanned out to a stage: ``seed + hash(tag)`` mod 2**32."""
        h = int(hashlib.sha256(tag.encode()).hexdigest()[:8], 16)
        return (self.seed + h) % (2 ** 32)


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_config_text(text: str) -> dict:
    """``key.path = value`` lines -> nested dict."""
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidSpec(f"config line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise InvalidSpec(f"config line {lineno}: {key!r} nests under a scalar")
        if leaf in node:
            raise InvalidSpec(f"config line {lineno}: duplicate key {key!r}")
        node[leaf] = _parse_value(raw)
    return out


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    kwargs = {}
    top = {f.name for f in fields(ExperimentConfig)}
    for key in list(d):
        if key not in top:
            raise InvalidSpec(f"unknown config key {key!r}")
    for name, cls in _SECTIONS.items():
        sub = d.pop(name, {}) or {}
        if not isinstance(sub, dict):
            raise InvalidSpec(f"{name} must be a section")
        known = {f.name for f in fields(cls)}
        for k, v in sub.items():
            if k not in known:
                raise InvalidSpec(f"unknown config key {name}.{k}")
            if (name, k) in _DERIVED:
                raise InvalidSpec(f"{name}.{k} is derived from the global seed; set 'seed' instead")
            if (name, k) in _TUPLE_FIELDS and isinstance(v, list):
                sub[k] = tuple(v)
        kwargs[name] = cls(**sub)
    kwargs.update(d)
    cfg = ExperimentConfig(**kwargs)
    # fan the global seed out to every stage
    cfg = replace(
        cfg,
        model=replace(cfg.model, seed=cfg.stage_seed("model")),
        target=replace(cfg.target, seed=cfg.stage_seed("target")),
        attack=replace(cfg.attack, seed=cfg.stage_seed("attack")),
        defense=replace(cfg.defense, seed=cfg.stage_seed("defense")),
    )
    cfg.validate()
    return cfg


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    d = parse_config_text(Path(path).read_text()) if path is not None else {}
    for k, v in (overrides or {}).items():
        if v is not None:
            d[k] = v
    return config_from_dict(d)


def dump_config(cfg: ExperimentConfig) -> str:
    """Inverse of :func:`parse_config_text` for the user-settable keys."""
    lines = []
    d = cfg.to_dict()
    for k, v in d.items():
        if isinstance(v, dict):
            for sk, sv in v.items():
                if (k, sk) not in _DERIVED:
                    lines.append(f"{k}.{sk} = {json.dumps(sv) if not isinstance(sv, str) else sv}")
        else:
            lines.append(f"{k} = {json.dumps(v) if not isinstance(v, str) else v}")
    return "\n".join(lines) + "\n"
