"""Reference attributions: position rules and logistic-regression channel credit."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from camta.data import Journey

logger = logging.getLogger(__name__)

RULES = ("first", "last", "linear")


def rule_attribution(journey: Journey, kind: str) -> np.ndarray:
    """Per-touchpoint credit under the first-, last- or linear-touch rule."""
    n = len(journey)
    if n == 0:
        raise ValueError("empty journey")
    if kind not in RULES:
        raise ValueError(f"unknown rule {kind!r}; expected one of {RULES}")
    credit = np.zeros(n)
    if kind == "first":
        credit[0] = 1.0
    elif kind == "last":
        credit[-1] = 1.0
    else:
        credit[:] = 1.0 / n
    return credit


@dataclass
class ChannelCredit:
    credits: np.ndarray
    normalized: bool = True


def channel_counts(journeys: Sequence[Journey], n_channels: int) -> np.ndarray:
    X = np.zeros((len(journeys), n_channels))
    for i, j in enumerate(journeys):
        np.add.at(X[i], j.channels, 1.0)
    return X


def _objective(w, b, X, y, l2):
    z = X @ w + b
    # mean log-loss written with logaddexp for stability
    nll = np.mean(np.logaddexp(0.0, z) - y * z)
    return nll + 0.5 * l2 * float(w @ w)


def _gradient(w, b, X, y, l2):
    z = X @ w + b
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    r = (p - y) / len(y)
    return X.T @ r + l2 * w, float(r.sum())


@dataclass
class LRFit:
    coef: np.ndarray
    intercept: float
    n_iter: int
    losses: list[float]
    converged: bool


def lr_fit(X: np.ndarray, y: np.ndarray, l2: float = 1e-4, tol: float = 1e-6, max_iter: int = 10_000) -> LRFit:
    """L2-penalised logistic regression by gradient descent with Armijo backtracking.

    The objective is the mean log-loss plus ``l2/2 * |w|^2`` (intercept not
    penalised), so duplicating every example leaves the optimum unchanged.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.zeros(X.shape[1])
    b = 0.0
    step = 1.0
    f = _objective(w, b, X, y, l2)
    losses = [f]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        gw, gb = _gradient(w, b, X, y, l2)
        gnorm2 = float(gw @ gw) + gb * gb
        if gnorm2 < tol * tol:
            converged = True
            break
        step = min(step * 2.0, 1e4)
        while True:
            w_new, b_new = w - step * gw, b - step * gb
            f_new = _objective(w_new, b_new, X, y, l2)
            if f_new <= f - 0.5 * step * gnorm2 or step < 1e-16:
                break
            step *= 0.5
        w, b, f = w_new, b_new, f_new
        losses.append(f)
    return LRFit(w, b, it, losses, converged)


def lr_train(journeys: Sequence[Journey], n_channels: int, l2: float = 1e-4) -> LRFit:
    """Fit conversion on per-journey channel occurrence counts."""
    if not journeys:
        raise ValueError("empty training set")
    y = np.array([j.y for j in journeys], dtype=np.float64)
    if y.min() == y.max():
        raise ValueError("logistic-regression baseline needs both converting and non-converting journeys")
    return lr_fit(channel_counts(journeys, n_channels), y, l2=l2)


def lr_attribute(coefficients) -> ChannelCredit:
    """Floor coefficients at zero and normalise them into channel credits."""
    c = np.maximum(np.asarray(coefficients, dtype=np.float64), 0.0)
    total = c.sum()
    if total <= 0:
        warnings.warn("all logistic-regression coefficients are nonpositive; credits are zero")
        return ChannelCredit(np.zeros_like(c), normalized=False)
    return ChannelCredit(c / total)


def channel_credit_to_touchpoints(journey: Journey, credit: ChannelCredit) -> np.ndarray:
    """Spread channel credits over a journey's touchpoints, normalised per journey.

    Each touchpoint gets its channel's credit; the vector is rescaled to sum
    to one. A journey whose channels all have zero credit is split evenly.
    """
    raw = credit.credits[journey.channels]
    total = raw.sum()
    if total <= 0:
        return np.full(len(journey), 1.0 / len(journey))
    return raw / total
