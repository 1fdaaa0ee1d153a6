"""Run configuration: one JSON file, every field defaulted, unknown keys rejected."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from camta.budget import DEFAULT_FRACTIONS
from camta.data import MAX_LEN, SyntheticConfig
from camta.train import TrainConfig

# Hyperparams minus the data-derived fields (channel count, cardinalities)
MODEL_DEFAULTS = {
    "embedding_size": 64,
    "hidden_size": 64,
    "representation_size": 32,
    "head_size": 64,
    "dropout": 0.1,
    "lam": 5.0,
    "beta": 5.0,
    "attention_input": "concat",
    "linear_phi": False,
}


@dataclass
class DataSection:
    delimiter: str = "\t"
    column_map: dict = field(
        default_factory=lambda: {
            "timestamp": "timestamp",
            "user_id": "uid",
            "channel_id": "campaign",
            "click": "click",
            "cost": "cost",
            "conversion_id": "conversion_id",
            "covariates": [f"cat{i}" for i in range(1, 10)],
        }
    )
    channels: list = field(default_factory=list)  # explicit channel selection
    n_random_channels: int = 10  # used when channels is empty
    channel_seed: int = 0
    max_len: int = MAX_LEN
    top_v: int = 100
    split: list = field(default_factory=lambda: [0.6, 0.2, 0.2])
    split_seed: int = 0


@dataclass
class BudgetSection:
    fractions: list = field(default_factory=lambda: list(DEFAULT_FRACTIONS))
    cost_scale: float = 1000.0
    value: float = 1.0


@dataclass
class SegmentSection:
    n_init: int = 100
    seed: int = 0


@dataclass
class RunConfig:
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    data: DataSection = field(default_factory=DataSection)
    model: dict = field(default_factory=lambda: dict(MODEL_DEFAULTS))
    train: TrainConfig = field(default_factory=TrainConfig)
    budget: BudgetSection = field(default_factory=BudgetSection)
    segment: SegmentSection = field(default_factory=SegmentSection)

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {
    "synthetic": SyntheticConfig,
    "data": DataSection,
    "train": TrainConfig,
    "budget": BudgetSection,
    "segment": SegmentSection,
}


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ValueError(f"config section {where!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValueError(f"unknown keys in config section {where!r}: {unknown}")
    kw = dict(raw)
    for key in ("cardinalities", "effects"):
        if key in kw:
            kw[key] = tuple(kw[key])
    return cls(**kw)


def config_from_dict(raw: dict) -> RunConfig:
    unknown = sorted(set(raw) - {f.name for f in fields(RunConfig)})
    if unknown:
        raise ValueError(f"unknown top-level config keys: {unknown}")
    kw = {}
    for name, cls in _SECTIONS.items():
        if name in raw:
            kw[name] = _build(cls, raw[name], name)
    if "model" in raw:
        bad = sorted(set(raw["model"]) - set(MODEL_DEFAULTS))
        if bad:
            raise ValueError(f"unknown keys in config section 'model': {bad}")
        kw["model"] = {**MODEL_DEFAULTS, **raw["model"]}
    cfg = RunConfig(**kw)
    cfg.train.validate()
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(raw)
