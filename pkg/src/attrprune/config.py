"""Experiment configuration: INI file <-> typed dataclasses."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError

DEFAULT_CONFIG = Path(__file__).with_name("default.ini")


@dataclass
class ModelConfig:
    paradigm: str = "residual"
    depth: int = 12
    width: int = 16
    classes: int = 3
    grid: int = 4
    image_size: int = 32
    init_seed: int = 0


@dataclass
class DataConfig:
    train_seed: int = 1
    train_count: int = 3200
    val_seed: int = 2
    val_count: int = 300
    cache_dir: str = ""


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 32
    seed: int = 0
    clip_norm: float = 10.0
    lr_decay_epochs: tuple = (24,)


@dataclass
class ScoreConfig:
    batches: int = 1
    batch_size: int = 32
    seed: int = 0
    include_bias: bool = False
    component: str = "sum"


@dataclass
class PruneConfig:
    rate: float = 0.05
    sweep_rates: tuple = (0.0, 0.05, 0.10, 0.20, 0.30)
    exempt: tuple = ()
    exempt_head: bool = True


@dataclass
class EvalConfig:
    conf_threshold: float = 0.05
    interpolation: str = "101"
    fps_passes: int = 100
    fps_warmup: int = 10
    fps_batch: int = 1


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    score: ScoreConfig = field(default_factory=ScoreConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            section = dataclasses.asdict(getattr(self, f.name))
            out[f.name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Override every run seed (init, SGD order, attribution sampling); data seeds stay."""
        return dataclasses.replace(
            self,
            model=dataclasses.replace(self.model, init_seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
            score=dataclasses.replace(self.score, seed=seed),
        )

    def validate(self) -> "ExperimentConfig":
        for r in self.prune.sweep_rates:
            if not 0.0 <= r < 1.0:
                raise ConfigurationError(f"sweep rate {r} outside [0, 1)")
        rates = list(self.prune.sweep_rates)
        if rates != sorted(set(rates)) or 0.0 not in rates:
            raise ConfigurationError(f"sweep rates must be strictly increasing and include 0, got {rates}")
        if not 0.0 <= self.prune.rate < 1.0:
            raise ConfigurationError(f"prune rate {self.prune.rate} outside [0, 1)")
        if self.score.component not in ("sum", "objectness", "class", "box"):
            raise ConfigurationError(f"unknown loss component {self.score.component!r}")
        if self.eval.interpolation not in ("101", "all"):
            raise ConfigurationError(f"interpolation must be 101 or all, got {self.eval.interpolation!r}")
        return self


def _coerce(value: str, default, name: str):
    try:
        if isinstance(default, bool):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            items = [v.strip() for v in value.replace("\n", ",").split(",") if v.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(v) for v in items)
        return value.strip()
    except ValueError:
        raise ConfigurationError(f"{name}: cannot parse {value!r} as {type(default).__name__}") from None


def load_config(path=None) -> ExperimentConfig:
    """Read an INI file; missing keys fall back to the built-in defaults."""
    parser = configparser.ConfigParser()
    path = Path(path) if path else DEFAULT_CONFIG
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    parser.read(path)
    cfg = ExperimentConfig()
    known = {f.name for f in dataclasses.fields(cfg)}
    for section in parser.sections():
        if section not in known:
            raise ConfigurationError(f"{path}: unknown section [{section}]")
        current = getattr(cfg, section)
        defaults = {f.name: getattr(current, f.name) for f in dataclasses.fields(current)}
        updates = {}
        for key, raw in parser.items(section):
            if key not in defaults:
                raise ConfigurationError(f"{path}: unknown key {section}.{key}")
            updates[key] = _coerce(raw, defaults[key], f"{section}.{key}")
        setattr(cfg, section, dataclasses.replace(current, **updates))
    return cfg.validate()


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for section, values in data.items():
        current = getattr(cfg, section)
        values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
        setattr(cfg, section, dataclasses.replace(current, **values))
    return cfg.validate()
