"""Experiment configuration.

Every key has a default. Loss and detector defaults: alpha=1.0, beta=0.05, margin=10.0,
gamma=1.0, beta_legacy=0.0005, retention=0.95. Everything about optimisation
(lr, epochs, batch size) and all architecture sizes are desk-scale choices.
lam=0.5 is a guess borrowed from the usual margin-loss down-weighting.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import yaml

_CHOICES = {
    "encoder": ("tiny-conv", "residual-small"),
    "capsule_layer": ("routing", "fc"),
    "routing_mode": ("standard", "gated"),
    "routing_softmax_axis": ("outputs", "inputs"),
    "target_mode": ("fixed", "learnable"),
    "loss_mode": ("cvae", "legacy_margin", "softmax_baseline"),
    "detector": ("distance_threshold", "density_fit"),
    "density_classifier": ("max_logdensity", "min_kl"),
    "score": ("knownness", "max_softmax", "max_logdensity"),
    "open_set": ("split", "noise", "mnist-noise"),
    "dtype": ("float32", "float64"),
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # data
    dataset: str = "mnist"
    data_dir: str | None = None
    split_file: str | None = None
    split_index: int = 0
    split_seed: int = 0
    n_known: int = 6
    max_train_per_class: int | None = None
    max_test_per_class: int | None = None
    calibration_fraction: float = 0.1
    open_set: str = "split"
    # model
    encoder: str = "tiny-conv"
    width: int = 16
    primary_channels: int = 8
    primary_dim: int = 8
    class_dim: int = 16
    latent_dim: int = 8
    decoder_width: int = 32
    capsule_layer: str = "routing"
    routing_iterations: int = 3
    routing_mode: str = "standard"
    routing_softmax_axis: str = "outputs"
    dropout_rate: float = 0.5
    # targets and loss
    target_mode: str = "learnable"
    freeze_target_variance: bool = False
    loss_mode: str = "cvae"
    alpha: float = 1.0
    beta: float = 0.05
    margin: float = 10.0
    gamma: float = 1.0
    lam: float = 0.5
    beta_legacy: float = 0.0005
    # detection
    detector: str = "distance_threshold"
    density_classifier: str = "max_logdensity"
    score: str = "knownness"
    retention: float = 0.95
    # optimisation
    lr: float = 1e-3
    epochs: int = 2
    batch_size: int = 64
    max_steps: int | None = None
    # seeds
    seed: int = 0
    data_seed: int = 0
    noise_seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for key, allowed in _CHOICES.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key}={getattr(self, key)!r} not in {allowed}")
        if not 0.0 < self.retention <= 1.0:
            raise ConfigError("retention must lie in (0, 1]")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1]")
        if self.routing_iterations < 1:
            raise ConfigError("routing_iterations must be >= 1")
        if not 0.0 <= self.calibration_fraction < 1.0:
            raise ConfigError("calibration_fraction must lie in [0, 1)")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        defaults = {f.name: f.default for f in fields(cls)}
        unknown = sorted(set(d) - defaults.keys())
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        d = dict(d)
        for key, value in d.items():
            # YAML reads "1e-3" as a string; coerce toward the default's type
            default = defaults[key]
            if isinstance(default, float) and isinstance(value, (int, str)) and not isinstance(value, bool):
                d[key] = float(value)
            elif isinstance(default, int) and not isinstance(default, bool) and isinstance(value, str):
                d[key] = int(value)
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def replace(self, **overrides) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(overrides)
        return ExperimentConfig.from_dict(d)


def parse_override(item: str) -> tuple[str, Any]:
    """``key=value`` with the value parsed as YAML (so 1e-3, true, null work)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def load_config(path=None, overrides=()) -> ExperimentConfig:
    d: dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text()
        d = (json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)) or {}
    for item in overrides:
        key, value = parse_override(item)
        d[key] = value
    return ExperimentConfig.from_dict(d)
