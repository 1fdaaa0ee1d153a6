"""Prediction metrics and box-plot summaries."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

EPS = 1e-12


def _bce(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    p = np.clip(p, EPS, 1.0 - EPS)
    return -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))


def log_loss_conv(predictions, labels) -> float:
    """Mean binary cross-entropy of conversion probabilities over journeys."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} predictions vs {y.shape} labels")
    if p.size == 0:
        raise ValueError("no predictions")
    return float(_bce(p, y).mean())


def log_loss_click(predictions, labels, mask=None) -> float:
    """Mean binary cross-entropy of click probabilities over valid touchpoints.

    Accepts padded 2-D arrays with a boolean ``mask``, or ragged lists of
    per-journey sequences (every entry valid).
    """
    if mask is None:
        p = np.concatenate([np.asarray(r, dtype=np.float64).ravel() for r in predictions])
        y = np.concatenate([np.asarray(r, dtype=np.float64).ravel() for r in labels])
        mask = np.ones(p.shape, dtype=bool)
    else:
        p = np.asarray(predictions, dtype=np.float64)
        y = np.asarray(labels, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
    if not (p.shape == y.shape == mask.shape):
        raise ValueError(f"shape mismatch: {p.shape}, {y.shape}, {mask.shape}")
    if not mask.any():
        raise ValueError("no valid touchpoints")
    return float(_bce(p[mask], y[mask]).mean())


def auc(scores, labels) -> float:
    """ROC AUC as the Mann-Whitney statistic, ties counted as one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError(f"length mismatch: {s.shape} scores vs {y.shape} labels")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int(len(y) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"AUC needs both classes, got {n_pos} positives and {n_neg} negatives")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MetricReport:
    LL_conv: float
    LL_click: float
    AUC: float
    n_journeys: int
    n_touchpoints: int
    n_converts: int
    n_clicks: int

    def to_dict(self) -> dict:
        return asdict(self)


def metric_report(conv_pred, conv_labels, click_pred, click_labels) -> MetricReport:
    """Collect LL_conv, LL_click and AUC from per-journey predictions (ragged click lists)."""
    y = np.asarray(conv_labels)
    n_clicks = int(sum(int(np.sum(c)) for c in click_labels))
    n_tp = int(sum(len(c) for c in click_labels))
    try:
        a = auc(conv_pred, y)
    except ValueError:
        a = float("nan")
    return MetricReport(
        LL_conv=log_loss_conv(conv_pred, y),
        LL_click=log_loss_click(click_pred, click_labels),
        AUC=a,
        n_journeys=int(len(y)),
        n_touchpoints=n_tp,
        n_converts=int(y.sum()),
        n_clicks=n_clicks,
    )


@dataclass
class BoxplotStats:
    q1: float
    median: float
    q3: float
    lower_whisker: float
    upper_whisker: float
    outliers: list[float] = field(default_factory=list)
    n: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def boxplot(values: Sequence[float]) -> BoxplotStats:
    """Five-number summary with whiskers at the furthest points within 1.5 IQR."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("box plot of an empty group")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    outliers = sorted(float(x) for x in v[(v < lo_fence) | (v > hi_fence)])
    return BoxplotStats(
        float(q1), float(med), float(q3), float(inside.min()), float(inside.max()), outliers, int(v.size)
    )


def boxplot_stats(groups: Mapping) -> dict:
    """Per-group :func:`boxplot`, keys preserved."""
    return {key: boxplot(vals) for key, vals in groups.items()}


def boxplot_rows(stats: Mapping, key_names: Sequence[str] = ("group",)) -> list[dict]:
    """Flatten box-plot stats into one row per group for CSV export."""
    rows = []
    for key, st in stats.items():
        key = key if isinstance(key, tuple) else (key,)
        row = dict(zip(key_names, key))
        row.update(
            q1=st.q1,
            median=st.median,
            q3=st.q3,
            lower_whisker=st.lower_whisker,
            upper_whisker=st.upper_whisker,
            n_outliers=len(st.outliers),
            n=st.n,
        )
        rows.append(row)
    return rows
