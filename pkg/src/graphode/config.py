"""Run configuration: one JSON document, every field defaulted, unknown keys rejected."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import CorpusSpec, FeatureConfig


@dataclass
class ModelConfig:
    gru_hidden: int = 64
    gru_layers: int = 2
    latent_graph_dim: int = 84
    latent_stochastic_dim: int = 16
    gnn_rounds: int = 1
    psi_channels: int = 16
    decay_hidden: int = 32
    residual_hidden: int = 0  # 0 -> latent dimension
    decoder_hidden: int = 128
    per_coordinate_decay: bool = False


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    weight_decay: float = 5e-4
    batch_size: int = 128
    eval_batch_size: int = 256
    max_epochs: int = 100
    grad_clip_norm: float = 5.0
    early_stop_patience: int = 5
    seed: int = 123
    stage: str = "forecast_pretrain"
    horizon: int = 1
    substeps_per_unit: int = 4
    freeze_stochastic_block: bool = True
    gate_enabled: bool = True
    stochastic_enabled: bool = True
    random_gate: bool = False
    pooling: str = "max"
    tau: int = 3
    sigma_noise: float = 0.1
    obs_len: int = 8
    sample_stride: int = 2
    structure_weight: float = 0.0
    finetune_unfreeze: bool = False
    finetune_learning_rate: float = 0.0  # 0 -> learning_rate
    record_timing: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be > 0 and weight_decay >= 0")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.stage not in ("forecast_pretrain", "classify_finetune"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.pooling not in ("max", "mean", "sum"):
            raise ValueError(f"unknown pooling {self.pooling!r}")

    @property
    def gate_mode(self) -> str:
        if self.random_gate:
            return "random"
        return "learned" if self.gate_enabled else "off"


@dataclass
class RunConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    threshold_policy: str = "optimal"
    field_resolution: int = 20

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"


class ConfigError(ValueError):
    pass


def _build(cls, data: dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}.{name}: expected a boolean")
            kwargs[name] = value
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where}.{name}: expected an integer")
            kwargs[name] = value
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}.{name}: expected a number")
            kwargs[name] = float(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from err


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "config")


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return config_from_dict(json.loads(Path(path).read_text()))


def apply_override(cfg: RunConfig, dotted: str, raw: str) -> RunConfig:
    """``section.key=value`` override; the value is parsed as JSON when possible."""
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    data = cfg.to_json()
    node = data
    keys = dotted.split(".")
    for k in keys[:-1]:
        if k not in node or not isinstance(node[k], dict):
            raise ConfigError(f"override {dotted}: unknown section {k!r}")
        node = node[k]
    node[keys[-1]] = value
    return config_from_dict(data)
