"""User return, 3-means segmentation and per-group channel affinity."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from sklearn.cluster import KMeans

from camta.data import Journey
from camta.metrics import boxplot

logger = logging.getLogger(__name__)

GROUP_NAMES = ("low", "medium", "high")


def user_return(journeys: Sequence[Journey], attention: Mapping[str, Sequence[float]], conversion: Mapping[str, float]):
    """Mean of ``a_t * y_hat / cost_t`` over a user's costed touchpoints.

    Returns ``None`` when the user has no touchpoint with positive cost.
    """
    rets = []
    skipped = 0
    for j in journeys:
        a = np.asarray(attention[j.journey_id], dtype=np.float64)
        y_hat = float(conversion[j.journey_id])
        for a_t, cost in zip(a, j.costs):
            if cost <= 0:
                skipped += 1
                continue
            rets.append(a_t * y_hat / cost)
    if skipped:
        logger.warning("user %s: %d zero-cost touchpoints excluded", journeys[0].user_id if journeys else "?", skipped)
    if not rets:
        return None
    return float(np.mean(rets))


@dataclass
class UserReturn:
    user_id: str
    value: float
    group: str = ""


def user_returns(journeys, attention, conversion) -> tuple[list[UserReturn], list[str]]:
    """Per-user returns; the second item lists users excluded for lack of costed touchpoints."""
    by_user = defaultdict(list)
    for j in journeys:
        by_user[j.user_id].append(j)
    out, excluded = [], []
    for user in sorted(by_user):
        r = user_return(by_user[user], attention, conversion)
        if r is None:
            excluded.append(user)
        else:
            out.append(UserReturn(user, r))
    return out, excluded


def cluster_users(values: Sequence[float], k: int = 3, seed: int = 0, n_init: int = 100):
    """1-D k-means (k-means++ seeding, ``n_init`` restarts); labels ranked by centroid.

    Returns ``(labels, centroids)`` where label 0 is the lowest centroid.
    """
    x = np.asarray(values, dtype=np.float64).reshape(-1, 1)
    if len(np.unique(x)) < k:
        raise ValueError(f"k-means with k={k} needs at least {k} distinct values")
    km = KMeans(n_clusters=k, init="k-means++", n_init=n_init, random_state=seed).fit(x)
    order = np.argsort(km.cluster_centers_[:, 0], kind="stable")
    rank = np.empty(k, dtype=int)
    rank[order] = np.arange(k)
    return rank[km.labels_], km.cluster_centers_[order, 0]


def segment_users(returns: list[UserReturn], seed: int = 0, n_init: int = 100) -> tuple[list[UserReturn], np.ndarray]:
    labels, centroids = cluster_users([r.value for r in returns], k=len(GROUP_NAMES), seed=seed, n_init=n_init)
    grouped = [UserReturn(r.user_id, r.value, GROUP_NAMES[lab]) for r, lab in zip(returns, labels)]
    return grouped, centroids


def channel_affinity(journeys: Sequence[Journey], attention: Mapping[str, Sequence[float]], n_channels: int) -> dict[str, np.ndarray]:
    """Per-user attention mass on each channel, summed over the user's touchpoints."""
    aff: dict[str, np.ndarray] = defaultdict(lambda: np.zeros(n_channels))
    for j in journeys:
        np.add.at(aff[j.user_id], j.channels, np.asarray(attention[j.journey_id], dtype=np.float64))
    return dict(aff)


def channel_affinity_stats(users: Sequence[UserReturn], affinity: Mapping[str, np.ndarray], n_channels: int) -> dict:
    """Box-plot statistics keyed by ``(group, channel)``."""
    groups = defaultdict(list)
    for u in users:
        groups[u.group].append(affinity[u.user_id])
    stats = {}
    for name in GROUP_NAMES:
        if not groups.get(name):
            continue
        mat = np.vstack(groups[name])
        for k in range(n_channels):
            stats[(name, k)] = boxplot(mat[:, k])
    return stats
