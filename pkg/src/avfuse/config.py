"""Experiment configuration: one JSON document, validated section by section.

Top-level keys::

    seed, out_dir, data, model_a, model_v, pretrain, finetune, plan, masking, diagnostics

``seed`` drives data generation and every training stage; the ``data`` and
``plan`` sections therefore carry no seed of their own.
"""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from avfuse.data.synthetic import SyntheticSpec
from avfuse.errors import ContractError
from avfuse.fusion.masking import MaskingPolicy
from avfuse.fusion.strategies import StagePlan
from avfuse.fusion.train import OptimConfig
from avfuse.models import ModelConfig


class ConfigError(ContractError):
    """Invalid configuration; the message names the offending field path."""


@dataclass
class ModelSection:
    channels: list[int] = field(default_factory=lambda: [8, 16, 32])
    residual_connections: bool = False
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1


@dataclass
class TrainSection:
    modality: str = "a"
    epochs: int = 20
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    snr: float | None = None   # overrides the data section's snr for this modality

    def optim(self) -> OptimConfig:
        return OptimConfig(self.lr, self.momentum, self.weight_decay, self.batch_size)


@dataclass
class FinetuneSection(TrainSection):
    modality: str = "v"
    lr: float = 0.01
    snr: float | None = 1.5
    init_alpha: float = 0.5
    new_head: bool = True


@dataclass
class DiagnosticsSection:
    threshold: float = 1e-10
    dead_fraction: float = 0.99
    activation_tol: float = 1e-6
    probe_samples: int = 256
    inject_fraction: float = 0.5
    inject_magnitude: float = 1e-12
    inject_sign: int = -1


SECTIONS = {
    "data": SyntheticSpec,
    "model_a": ModelSection,
    "model_v": ModelSection,
    "pretrain": TrainSection,
    "finetune": FinetuneSection,
    "plan": StagePlan,
    "masking": MaskingPolicy,
    "diagnostics": DiagnosticsSection,
}
# fields supplied from elsewhere, never from the file
_DERIVED = {"data": {"seed"}, "plan": {"seed", "strategy", "abri_target"}}


def _fields(section: str) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(SECTIONS[section]) if f.name not in _DERIVED.get(section, ())}


def _default(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return copy.deepcopy(f.default)
    return f.default_factory()


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data: dict = field(default_factory=dict)
    model_a: dict = field(default_factory=dict)
    model_v: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)
    plan: dict = field(default_factory=dict)
    masking: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in SECTIONS:
            known = _fields(name)
            given = getattr(self, name)
            if not isinstance(given, dict):
                raise ConfigError(f"{name}: expected an object, got {type(given).__name__}")
            unknown = sorted(set(given) - set(known))
            if unknown:
                raise ConfigError(f"{name}.{unknown[0]}: unknown key (allowed: {', '.join(sorted(known))})")
            full = {k: _default(f) for k, f in known.items()}
            full.update(given)
            setattr(self, name, full)
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError(f"seed: must be a non-negative integer, got {self.seed!r}")
        # build every section once so bad values surface with their path
        for name in SECTIONS:
            try:
                self.section(name)
                if name.startswith("model_"):
                    self.model_config(name[-1], (1, 8, 8), 2)
            except ConfigError:
                raise
            except (ContractError, TypeError, ValueError) as exc:
                raise ConfigError(f"{name}: {exc}") from None
        for name in ("pretrain", "finetune"):
            t = self.section(name)
            if t.modality not in ("a", "v"):
                raise ConfigError(f"{name}.modality: must be 'a' or 'v', got {t.modality!r}")
            if t.epochs < 1 or t.lr <= 0 or t.batch_size < 1:
                raise ConfigError(f"{name}: epochs, lr and batch_size must be positive")
            if t.snr is not None and t.snr <= 0:
                raise ConfigError(f"{name}.snr: must be > 0, got {t.snr}")
        d = self.section("diagnostics")
        if not 0 <= d.inject_fraction <= 1:
            raise ConfigError(f"diagnostics.inject_fraction: must lie in [0, 1], got {d.inject_fraction}")
        if d.probe_samples < 1:
            raise ConfigError("diagnostics.probe_samples: must be >= 1")

    def section(self, name: str, **extra):
        values = dict(getattr(self, name))
        if name == "data":
            values["seed"] = self.seed
        if name == "plan":
            values["seed"] = self.seed
        values.update(extra)
        return SECTIONS[name](**values)

    def synthetic_spec(self, **overrides) -> SyntheticSpec:
        return self.section("data", **overrides)

    def model_config(self, modality: str, input_shape, n_classes: int) -> ModelConfig:
        m = self.section(f"model_{modality}")
        return ModelConfig(input_shape=tuple(input_shape), n_classes=n_classes, **asdict(m))

    def to_json(self) -> dict:
        doc = {"seed": self.seed, "out_dir": self.out_dir}
        for name in SECTIONS:
            doc[name] = json.loads(json.dumps(getattr(self, name)))
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentConfig":
        return from_json(doc)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        doc = self.to_json()
        doc["seed"] = seed
        return ExperimentConfig.from_json(doc)


def from_json(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    allowed = {"seed", "out_dir", *SECTIONS}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown top-level key (allowed: {', '.join(sorted(allowed))})")
    return ExperimentConfig(**copy.deepcopy(doc))


def _read(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None


def load_config(path) -> ExperimentConfig:
    return from_json(_read(path))


def parse_override(item: str) -> tuple[list[str], object]:
    """``section.key=value``; the value is parsed as JSON, falling back to a plain string."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    key, raw = item.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ConfigError(f"override {item!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    doc = copy.deepcopy(doc)
    for item in overrides or []:
        path, value = parse_override(item)
        node = doc
        for p in path[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{'.'.join(path)}: {p} is not a section")
        node[path[-1]] = value
    return doc


def resolve_config(path=None, overrides: list[str] | None = None) -> ExperimentConfig:
    doc = _read(path) if path else {}
    return from_json(apply_overrides(doc, overrides or []))
