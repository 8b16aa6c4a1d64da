"""Run configuration, loaded from JSON.

Schema (every section and key optional; defaults shown by ``RunConfig()``)::

    {
      "model":  {ModelConfig fields: grid_size, num_colors, d_model, num_heads, ...},
      "data":   {"train_size": 4000, "val_size": 500, "max_objects": 4},
      "train":  {TrainConfig fields: steps, batch_size, lr, ...},
      "sweep":  {"strategies": [...], "ratios": [...], "alignments": [...],
                 "misalignment_ratio": 0.5},
      "seeds":  {"data": 0, "train": 0, "eval": 0},
      "timing": {"enabled": false, "warmup": 3, "runs": 50, "sample": 8},
      "paths":  {"out_dir": "runs/default", "weights": null}
    }
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..model import ModelConfig
from ..pruning import ALIGNMENTS, STRATEGIES
from ..rope import ConfigError
from .train import TrainConfig

DEFAULT_RATIOS = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


@dataclass
class DataConfig:
    train_size: int = 4000
    val_size: int = 500
    max_objects: int = 4


@dataclass
class SweepConfig:
    strategies: list[str] = field(default_factory=lambda: list(STRATEGIES))
    ratios: list[float] = field(default_factory=lambda: list(DEFAULT_RATIOS))
    alignments: list[str] = field(default_factory=lambda: ["gap", "shifted"])
    # ratio whose shifted-pruning offset sizes the full-sequence shift experiment
    misalignment_ratio: float = 0.5


@dataclass
class Seeds:
    data: int = 0
    train: int = 0
    eval: int = 0


@dataclass
class TimingConfig:
    enabled: bool = False
    warmup: int = 3
    runs: int = 50
    sample: int = 8


@dataclass
class Paths:
    out_dir: str = "runs/default"
    weights: str | None = None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(num_heads=8))
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    seeds: Seeds = field(default_factory=Seeds)
    timing: TimingConfig = field(default_factory=TimingConfig)
    paths: Paths = field(default_factory=Paths)

    def validate(self) -> None:
        if not self.sweep.strategies:
            raise ConfigError("sweep needs at least one strategy")
        for s in self.sweep.strategies:
            if s not in STRATEGIES and s != "none":
                raise ConfigError(f"unknown strategy {s!r}")
        for a in self.sweep.alignments:
            if a not in ALIGNMENTS:
                raise ConfigError(f"unknown alignment {a!r}")
        for r in [*self.sweep.ratios, self.sweep.misalignment_ratio]:
            if not 0.0 < r <= 1.0:
                raise ConfigError(f"ratio {r} outside (0, 1]")
        if self.data.train_size < 1 or self.data.val_size < 1:
            raise ConfigError("dataset sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        sections = {"model": ModelConfig, "data": DataConfig, "train": TrainConfig, "sweep": SweepConfig,
                    "seeds": Seeds, "timing": TimingConfig, "paths": Paths}
        unknown = set(d) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, typ in sections.items():
            if name not in d:
                continue
            allowed = {f.name for f in fields(typ)}
            bad = set(d[name]) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            try:
                kwargs[name] = typ(**d[name])
            except TypeError as e:
                raise ConfigError(f"bad {name!r} section: {e}") from e
        if "model" not in d:
            kwargs["model"] = RunConfig().model
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(raw)
