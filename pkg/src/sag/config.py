"""Experiment configuration with strict ``key=value`` overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from sag.guidance import DBSCAN_EPS, DBSCAN_MIN_SAMPLES
from sag.models import ModelConfig
from sag.synth import SlideSpec

NESTED = {"model": ModelConfig, "slide": SlideSpec}


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    slide: SlideSpec = field(default_factory=SlideSpec)
    # guidance
    use_hg: bool = True
    use_tg: bool = True
    hg_target: str = "head"  # or "mean": head-averaged attention per layer
    hg_normalization: str = "per_scale"
    dbscan_eps: float = DBSCAN_EPS
    dbscan_min_samples: int = DBSCAN_MIN_SAMPLES
    tissue_darker: bool = True
    # optimizer, final-step model selection
    optimizer: str = "adam"  # or "sgd"
    lr: float = 0.005
    momentum: float = 0.9
    log_var_lr: float | None = 0.1  # None means lr
    epochs: int = 20
    batch_size: int = 20
    log_var_floor: dict = field(default_factory=lambda: {"cls": 0.0, "inout": -1.0})
    seeds: list = field(default_factory=lambda: list(range(15)))
    # data
    n_train: int = 200
    n_val: int = 50
    n_test: int = 100
    data_seed: int = 0

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.slide, dict):
            self.slide = SlideSpec.from_dict(self.slide)
        self.seeds = [int(s) for s in self.seeds]
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if self.hg_target not in ("head", "mean"):
            raise ValueError("hg_target must be 'head' or 'mean'")
        if self.hg_normalization != "per_scale":
            raise ValueError("only per-scale HG normalization is supported")
        self.model.num_classes = self.slide.num_classes
        self.model.num_scales = len(self.slide.scales)
        self.model.e = self.slide.e

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["slide"] = self.slide.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        for name, sub in NESTED.items():
            if name in d:
                sub_known = {f.name for f in dataclasses.fields(sub)}
                bad = set(d[name]) - sub_known
                if bad:
                    raise KeyError(f"unknown {name} keys: {sorted(bad)}")
        return cls(**d)


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides) -> dict:
    """Apply ``key=value`` strings; dotted keys reach into ``model``/``slide``."""
    d = json.loads(json.dumps(d))
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        path = key.strip().split(".")
        target = d
        for part in path[:-1]:
            if part not in target or not isinstance(target[part], dict):
                raise KeyError(f"unknown config key {key!r}")
            target = target[part]
        if path[-1] not in target:
            raise KeyError(f"unknown config key {key!r}")
        target[path[-1]] = parse_value(text)
    return d


def load_config(path=None, overrides=None, seed: int | None = None) -> ExperimentConfig:
    base = ExperimentConfig().to_dict()
    if path is not None:
        user = json.loads(Path(path).read_text())
        base = apply_overrides(base, _flatten(user))
    base = apply_overrides(base, overrides)
    if seed is not None:
        base["data_seed"] = seed
        base["slide"]["seed"] = seed
    return ExperimentConfig.from_dict(base)


def _flatten(d: dict, prefix: str = "") -> list[str]:
    items = []
    for k, v in d.items():
        if k in NESTED and not prefix and isinstance(v, dict):
            items += _flatten(v, f"{k}.")
        else:
            items.append(f"{prefix}{k}={json.dumps(v)}")
    return items
