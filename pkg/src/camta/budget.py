"""Attribution-guided budget allocation and the historical replay protocol."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from camta.data import Journey

logger = logging.getLogger(__name__)

DEFAULT_FRACTIONS = (0.2, 0.4, 0.6, 0.8, 1.0)


def channel_roi(
    journeys: Sequence[Journey],
    attributions: Mapping[str, Sequence[float]],
    n_channels: int,
    value: float = 1.0,
) -> np.ndarray:
    """Attributed conversion value per unit of spend, per channel.

    Numerator: attention mass on channel ``k`` summed over converting
    journeys, times ``value``. Denominator: all spend on ``k``. Channels
    with no spend get ROI 0.
    """
    num = np.zeros(n_channels)
    den = np.zeros(n_channels)
    for j in journeys:
        if j.journey_id not in attributions:
            raise ValueError(f"no attribution for journey {j.journey_id}")
        a = np.asarray(attributions[j.journey_id], dtype=np.float64)
        if len(a) != len(j):
            raise ValueError(f"journey {j.journey_id}: {len(a)} weights for {len(j)} touchpoints")
        ch = np.asarray(j.channels)
        np.add.at(den, ch, j.costs)
        if j.y == 1:
            np.add.at(num, ch, a * value)
    roi = np.zeros(n_channels)
    spent = den > 0
    roi[spent] = num[spent] / den[spent]
    if (~spent).any():
        logger.warning("channels with no spend get ROI 0: %s", np.flatnonzero(~spent).tolist())
    return roi


def allocate(roi: Sequence[float], total_budget: float) -> np.ndarray:
    """Split ``total_budget`` across channels in proportion to ROI."""
    r = np.asarray(roi, dtype=np.float64)
    if (r < 0).any():
        raise ValueError("ROI must be nonnegative")
    if r.sum() <= 0:
        raise ValueError("all channel ROIs are zero; nothing to allocate by")
    if total_budget < 0:
        raise ValueError("total budget must be nonnegative")
    return r / r.sum() * total_budget


@dataclass
class BudgetReport:
    roi: list[float]
    budgets: list[float]
    total_budget: float
    fraction: float
    true_conversions: int
    expenditure: float
    cpa: float | None
    cvr: float
    blacklisted: int
    n_journeys: int
    blacklisted_ids: list[str] = field(default_factory=list)

    @property
    def cpa_defined(self) -> bool:
        return self.cpa is not None

    def to_dict(self) -> dict:
        return asdict(self)


def replay(
    journeys: Sequence[Journey],
    budgets: Sequence[float],
    cost_scale: float = 1.0,
    roi: Sequence[float] | None = None,
    fraction: float = float("nan"),
) -> BudgetReport:
    """Walk test impressions in serving order against per-channel budgets.

    Impressions are ordered by timestamp, then journey id, then position.
    A journey is blacklisted the first time its channel budget cannot cover
    an impression's (scaled) cost; its later impressions are skipped, and
    costs it already consumed stay spent.
    """
    remaining = np.array(budgets, dtype=np.float64)
    if (remaining < 0).any():
        raise ValueError("budgets must be nonnegative")
    events = []
    for j in journeys:
        for pos, tp in enumerate(j.touchpoints):
            if not 0 <= tp.channel < len(remaining):
                raise ValueError(f"journey {j.journey_id}: channel {tp.channel} has no budget entry")
            events.append((tp.timestamp, j.journey_id, pos, tp.channel, tp.cost * cost_scale))
    events.sort(key=lambda e: (e[0], e[1], e[2]))

    blacklist: set[str] = set()
    for _, jid, _, k, cost in events:
        if jid in blacklist:
            continue
        if remaining[k] < cost:
            blacklist.add(jid)
            continue
        remaining[k] -= cost

    initial = np.array(budgets, dtype=np.float64)
    conversions = sum(1 for j in journeys if j.y == 1 and j.journey_id not in blacklist)
    expenditure = float((initial - remaining).sum())
    n = len(journeys)
    return BudgetReport(
        roi=[float(x) for x in roi] if roi is not None else [],
        budgets=initial.tolist(),
        total_budget=float(initial.sum()),
        fraction=fraction,
        true_conversions=conversions,
        expenditure=expenditure,
        cpa=expenditure / conversions if conversions else None,
        cvr=conversions / n if n else 0.0,
        blacklisted=len(blacklist),
        n_journeys=n,
        blacklisted_ids=sorted(blacklist),
    )


def budget_sweep(
    journeys: Sequence[Journey],
    attributions: Mapping[str, Sequence[float]],
    n_channels: int,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    cost_scale: float = 1000.0,
    value: float = 1.0,
) -> list[BudgetReport]:
    """ROI -> allocation -> replay at each budget fraction of the total scaled test cost."""
    roi = channel_roi(journeys, attributions, n_channels, value)
    total_cost = sum(sum(j.costs) for j in journeys) * cost_scale
    reports = []
    for f in fractions:
        if not 0 <= f or not math.isfinite(f):
            raise ValueError(f"invalid budget fraction {f}")
        budgets = allocate(roi, f * total_cost)
        reports.append(replay(journeys, budgets, cost_scale, roi=roi, fraction=f))
    return reports


def sweep_rows(reports: Sequence[BudgetReport]) -> list[dict]:
    return [
        {
            "fraction": r.fraction,
            "CPA": "" if r.cpa is None else r.cpa,
            "CVR": r.cvr,
            "true_conversions": r.true_conversions,
            "expenditure": r.expenditure,
            "blacklisted": r.blacklisted,
        }
        for r in reports
    ]
