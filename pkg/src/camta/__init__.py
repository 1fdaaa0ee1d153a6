"""Attention-based multi-touch attribution with budget replay and user segmentation."""

from camta.data import Journey, SyntheticConfig, Touchpoint, generate_synthetic
from camta.estimators import (
    CamtaAttributor,
    JourneyEncoder,
    LogisticAttributor,
    ReturnSegmenter,
    RuleAttributor,
)
from camta.model import Hyperparams

__all__ = [
    "CamtaAttributor",
    "Hyperparams",
    "Journey",
    "JourneyEncoder",
    "LogisticAttributor",
    "ReturnSegmenter",
    "RuleAttributor",
    "SyntheticConfig",
    "Touchpoint",
    "generate_synthetic",
]

__version__ = "0.1.0"
