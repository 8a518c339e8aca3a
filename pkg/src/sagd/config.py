"""Experiment configuration: nested dataclasses, YAML files, dotted overrides."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError

OUTPUT_ROOT_ENV = "SAGD_OUTPUT_ROOT"


@dataclass
class DataSection:
    source: str = "toy"
    kind: str = "gaussian_mixture"
    num_classes: int = 4
    dim: int = 16
    samples_per_class: int = 200
    test_per_class: int = 100
    class_separation: float = 6.0
    ood_shift: float = 6.0
    noise_std: float = 1.0
    image_root: str = ""
    ood_root: str = ""
    views_per_sample: int = 1
    augment_std: float = 0.3


@dataclass
class ModelSection:
    architecture: str = "mlp"
    embed_dim: int = 128
    hidden_dim: int = 128
    curvature: float = 0.01
    clip_radius: float = 2.0
    dtype: str = "float64"


@dataclass
class LossSection:
    sphere_temperature: float = 0.1
    hyperbolic_temperature: float = 0.1
    hyperbolic_reduction: str = "mean"
    weight_hypersphere: float = 1.0
    weight_hyperbolic: float = 1.0
    weight_ce: float = 1.0
    ema_factor: float = 0.95


@dataclass
class JitterSection:
    alpha: float = 10.0
    sigma: float = 0.1
    beta: float = 2.0


@dataclass
class AttackSection:
    name: str = "jitter"
    epsilon: float = 0.5
    step_size: float = 0.125
    steps: int = 10
    random_start: bool = True
    input_range: list = field(default_factory=lambda: [-20.0, 20.0])
    jitter: JitterSection = field(default_factory=JitterSection)
    eval_policy: str = "both"
    train_mix: str = "adversarial"


@dataclass
class OptimSection:
    rho: float = 0.05
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    radius_mode: str = "per_group"
    schedule: str = "cosine"


@dataclass
class EvalSection:
    attacks: list = field(default_factory=lambda: ["none", "jitter", "pgd", "fgsm"])
    scorer: str = "knn"
    k: int = 0
    ridge: float = 1e-3
    histogram_bins: int = 30
    batch_size: int = 1024


@dataclass
class SharpnessSection:
    rhos: list = field(default_factory=lambda: [0.0, 0.01, 0.02, 0.05, 0.1])
    trials: int = 1
    every: int = 0
    batch_size: int = 256


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    attack: AttackSection = field(default_factory=AttackSection)
    optim: OptimSection = field(default_factory=OptimSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sharpness: SharpnessSection = field(default_factory=SharpnessSection)
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    output_dir: str = "runs/default"
    checkpoint_every: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentConfig":
        return _build(cls, d or {}, "")

    def resolved_output_dir(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        return Path(root) / out if root and not out.is_absolute() else out


PAPER_SCALE = {
    "epochs": 500, "batch_size": 512, "optim.lr": 0.5,
    "attack.epsilon": 8 / 255, "attack.step_size": 2 / 255, "attack.input_range": [0.0, 1.0],
}


def _build(cls, d, prefix):
    if not isinstance(d, dict):
        raise ConfigError(f"section {prefix or '<root>'} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in d.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.")
        else:
            kwargs[name] = _coerce(value, default, prefix + name)
    return cls(**kwargs)


def _coerce(value, default, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads exponent forms without a dot (1e-4) as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key} must be a list")
        return list(value)
    return value


def set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override {key}: {p} is not a section")
    node[parts[-1]] = value


def parse_override(text: str):
    """``key=value`` with the value parsed as YAML (numbers, lists, booleans)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value for {key}: {exc}") from exc
    if value is None:
        value = raw
    return key.strip().lstrip("-"), value


def load_config(path=None, overrides=()) -> ExperimentConfig:
    d = {}
    if path:
        try:
            d = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        set_dotted(d, key, value)
    return ExperimentConfig.from_dict(d)


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
