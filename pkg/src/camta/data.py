"""Impression logs, journeys, vocabularies and the confounded synthetic generator."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import warnings
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

JOURNEY_FORMAT_VERSION = 1
N_COVARIATES = 9
MAX_LEN = 20

IMPRESSION_FIELDS = ("timestamp", "user_id", "channel_id", "click", "cost", "conversion_id")


@dataclass(frozen=True)
class Impression:
    timestamp: int
    user_id: str
    channel_id: str
    click: int
    cost: float
    conversion_id: str | None = None
    covariates: tuple[str, ...] = ()

    def __post_init__(self):
        if self.cost < 0:
            raise ValueError(f"negative cost {self.cost}")
        if self.click not in (0, 1):
            raise ValueError(f"click must be 0 or 1, got {self.click}")


@dataclass(frozen=True)
class Touchpoint:
    covariates: tuple
    channel: int
    click: int
    cost: float
    timestamp: int


@dataclass(frozen=True)
class Journey:
    """A user's touchpoint sequence with at most one conversion (``y``)."""

    journey_id: str
    user_id: str
    touchpoints: tuple[Touchpoint, ...]
    y: int

    def __len__(self) -> int:
        return len(self.touchpoints)

    @property
    def channels(self) -> list[int]:
        return [tp.channel for tp in self.touchpoints]

    @property
    def clicks(self) -> list[int]:
        return [tp.click for tp in self.touchpoints]

    @property
    def costs(self) -> list[float]:
        return [tp.cost for tp in self.touchpoints]


def check_journey(journey: Journey, n_channels: int | None = None, max_len: int = MAX_LEN) -> None:
    """Raise ``ValueError`` if ``journey`` breaks any Journey invariant."""
    n = len(journey.touchpoints)
    if not 1 <= n <= max_len:
        raise ValueError(f"journey {journey.journey_id}: length {n} outside [1, {max_len}]")
    if journey.y not in (0, 1):
        raise ValueError(f"journey {journey.journey_id}: label {journey.y} not in {{0, 1}}")
    ts = [tp.timestamp for tp in journey.touchpoints]
    if any(b < a for a, b in zip(ts, ts[1:])):
        raise ValueError(f"journey {journey.journey_id}: timestamps decrease")
    for tp in journey.touchpoints:
        if tp.channel < 0 or (n_channels is not None and tp.channel >= n_channels):
            raise ValueError(
                f"journey {journey.journey_id}: channel index {tp.channel} outside [0, {n_channels})"
            )
        if tp.click not in (0, 1):
            raise ValueError(f"journey {journey.journey_id}: click label {tp.click}")
        if tp.cost < 0:
            raise ValueError(f"journey {journey.journey_id}: negative cost")


# -- ingestion ----------------------------------------------------------

@dataclass
class IngestResult:
    impressions: list[Impression]
    n_malformed: int


def ingest_log(path, column_map: dict, delimiter: str = "\t") -> IngestResult:
    """Parse a delimited impression log with a header row.

    ``column_map`` maps Impression fields (``timestamp``, ``user_id``,
    ``channel_id``, ``click``, ``cost``, ``conversion_id``) to header names,
    plus ``covariates``: a list of header names. Unparseable rows are skipped
    and counted. The result is sorted by (user_id, timestamp), stable.
    """
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise ValueError(f"cannot read impression log {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        header = reader.fieldnames or []
        wanted = [column_map[k] for k in IMPRESSION_FIELDS if column_map.get(k)]
        wanted += list(column_map.get("covariates", []))
        missing = [c for c in wanted if c not in header]
        if missing:
            raise ValueError(f"impression log {path} lacks mapped columns: {missing}")
        rows, bad = [], 0
        for row in reader:
            try:
                rows.append(_parse_row(row, column_map))
            except (ValueError, TypeError, KeyError):
                bad += 1
    if bad:
        logger.warning("%s: skipped %d malformed rows", path, bad)
    rows.sort(key=lambda imp: (imp.user_id, imp.timestamp))
    return IngestResult(rows, bad)


def _parse_row(row: dict, cmap: dict) -> Impression:
    conv_col = cmap.get("conversion_id")
    conv = row[conv_col].strip() if conv_col else ""
    if conv in ("", "-1", "None", "null"):
        conv = None
    cost = float(row[cmap["cost"]])
    if not math.isfinite(cost):
        raise ValueError("non-finite cost")
    return Impression(
        timestamp=int(float(row[cmap["timestamp"]])),
        user_id=row[cmap["user_id"]].strip(),
        channel_id=row[cmap["channel_id"]].strip(),
        click=int(float(row[cmap["click"]])),
        cost=cost,
        conversion_id=conv,
        covariates=tuple(row[c].strip() for c in cmap.get("covariates", [])),
    )


def select_channels(impressions: Sequence[Impression], n: int, seed: int) -> list[str]:
    """Seeded random choice of ``n`` distinct channels, returned sorted."""
    names = sorted({imp.channel_id for imp in impressions})
    if n > len(names):
        raise ValueError(f"asked for {n} channels, log has {len(names)}")
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(names), size=n, replace=False)
    return sorted(names[i] for i in picked)


def build_journeys(
    impressions: Sequence[Impression],
    selected_channels: Sequence[str],
    max_len: int = MAX_LEN,
) -> list[Journey]:
    """Cut each user's stream into journeys with at most one conversion.

    A conversion-bearing impression closes its journey (inclusive); any
    trailing impressions form a ``y=0`` journey. Journeys touching a channel
    outside ``selected_channels`` or longer than ``max_len`` are dropped whole.
    Channel indices follow the order of ``selected_channels``.
    """
    if not selected_channels:
        raise ValueError("selected_channels is empty")
    index = {name: k for k, name in enumerate(selected_channels)}
    by_user: dict[str, list[Impression]] = defaultdict(list)
    for imp in impressions:
        by_user[imp.user_id].append(imp)

    out: list[Journey] = []
    for user in sorted(by_user):
        chunks, cur = [], []
        for imp in by_user[user]:
            cur.append(imp)
            if imp.conversion_id is not None:
                chunks.append((cur, 1))
                cur = []
        if cur:
            chunks.append((cur, 0))
        for seq_no, (chunk, y) in enumerate(chunks):
            if len(chunk) > max_len:
                continue
            if any(imp.channel_id not in index for imp in chunk):
                continue
            tps = tuple(
                Touchpoint(imp.covariates, index[imp.channel_id], imp.click, imp.cost, imp.timestamp)
                for imp in chunk
            )
            out.append(Journey(f"{user}#{seq_no}", user, tps, y))
    return out


# -- vocabulary ----------------------------------------------------------

@dataclass
class VocabMap:
    """Per-field value->index maps (0 reserved for out-of-vocabulary) and channel names."""

    fields: list[dict[str, int]]
    channels: list[str]

    @property
    def cardinalities(self) -> list[int]:
        return [len(m) + 1 for m in self.fields]

    def to_dict(self) -> dict:
        return {"fields": self.fields, "channels": self.channels}

    @classmethod
    def from_dict(cls, d: dict) -> "VocabMap":
        return cls([dict(m) for m in d["fields"]], list(d["channels"]))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def build_vocab(journeys: Iterable[Journey], top_v: int, channels: Sequence[str] = ()) -> VocabMap:
    """Keep the ``top_v`` most frequent values per covariate field (ties lexicographic)."""
    if top_v < 1:
        raise ValueError(f"top_v must be >= 1, got {top_v}")
    counters: list[Counter] = []
    for j in journeys:
        for tp in j.touchpoints:
            if not counters:
                counters = [Counter() for _ in tp.covariates]
            for f, v in enumerate(tp.covariates):
                counters[f][str(v)] += 1
    fields = []
    for c in counters:
        ranked = sorted(c.items(), key=lambda kv: (-kv[1], kv[0]))[:top_v]
        fields.append({v: i + 1 for i, (v, _) in enumerate(ranked)})
    return VocabMap(fields, list(channels))


def encode(journeys: Iterable[Journey], vocab: VocabMap) -> list[Journey]:
    """Replace raw covariate values by vocabulary indices (unseen values map to 0)."""
    out = []
    for j in journeys:
        tps = tuple(
            replace(
                tp,
                covariates=tuple(vocab.fields[f].get(str(v), 0) for f, v in enumerate(tp.covariates)),
            )
            for tp in j.touchpoints
        )
        out.append(replace(j, touchpoints=tps))
    return out


# -- splitting ----------------------------------------------------------

def split(journeys: Sequence[Journey], fractions=(0.6, 0.2, 0.2), seed: int = 0):
    """Seeded journey-level shuffle, then contiguous train/validation/test slices."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three values summing to 1, got {fractions}")
    n = len(journeys)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_val = min(n_val, n - n_train)
    parts = (
        [journeys[i] for i in order[:n_train]],
        [journeys[i] for i in order[n_train : n_train + n_val]],
        [journeys[i] for i in order[n_train + n_val :]],
    )
    if n and any(not p for p in parts):
        warnings.warn(f"split of {n} journeys left an empty part: {[len(p) for p in parts]}")
    return parts


# -- synthetic oracle ----------------------------------------------------

@dataclass
class SyntheticConfig:
    """Generator settings for confounded journeys with known channel effects.

    Each user draws a latent context vector. Channel choice at every step
    follows ``softmax(confounding * affinity @ context)``, and the same
    context shifts click and conversion logits, so context confounds the
    channel-outcome relation. ``effects`` are the true per-channel
    contributions to the conversion logit.
    """

    n_users: int = 5000
    n_channels: int = 4
    cardinalities: tuple[int, ...] = (6, 6, 6)
    confounding: float = 2.0
    effects: tuple[float, ...] = (3.0, 1.0, 1.0, 1.0)
    base_click_rate: float = 0.2
    base_conversion_rate: float = 0.005
    effect_scale: float = 1.0
    context_dim: int = 2
    context_click: float = 1.0
    context_conversion: float = 1.0
    conversion_noise: float = 0.3
    covariate_noise: float = 0.5
    mean_length: float = 4.0
    max_len: int = MAX_LEN
    mean_cost: float = 0.002
    seed: int = 0

    def validate(self) -> None:
        if self.n_users < 1:
            raise ValueError("n_users must be >= 1")
        if self.n_channels < 2:
            raise ValueError("need at least 2 channels")
        if len(self.effects) != self.n_channels:
            raise ValueError(f"{len(self.effects)} effects for {self.n_channels} channels")
        if any(w < 0 for w in self.effects) or sum(self.effects) <= 0:
            raise ValueError("effects must be nonnegative and not all zero")
        if self.confounding < 0:
            raise ValueError("confounding strength must be >= 0")
        for name in ("base_click_rate", "base_conversion_rate"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if not self.cardinalities or any(c < 1 for c in self.cardinalities):
            raise ValueError("cardinalities must be positive")
        if self.mean_length < 1 or self.max_len < 1:
            raise ValueError("lengths must be >= 1")
        if self.mean_cost <= 0:
            raise ValueError("mean_cost must be positive")


@dataclass
class GroundTruth:
    effects: list[float]
    shares: dict[str, list[float]]
    conversion_prob: dict[str, float] = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "effects": self.effects,
            "shares": self.shares,
            "conversion_prob": self.conversion_prob,
            "params": self.params,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(
            list(d["effects"]),
            {k: list(v) for k, v in d["shares"].items()},
            dict(d.get("conversion_prob", {})),
            d.get("params", {}),
        )


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def generate_synthetic(config: SyntheticConfig) -> tuple[list[Journey], GroundTruth]:
    """Draw one journey per user from the confounded generator.

    Randomness for user ``i`` comes from a Philox stream keyed by
    ``(seed, i)``, so any subset of users can be regenerated independently.
    Covariate values are emitted as strings, ready for :func:`build_vocab`.
    """
    config.validate()
    K, D = config.n_channels, config.context_dim
    root = np.random.Generator(np.random.Philox(np.random.SeedSequence([config.seed, 0])))
    affinity = root.normal(size=(K, D))
    click_dir = root.normal(size=D) / math.sqrt(D)
    conv_dir = root.normal(size=D) / math.sqrt(D)
    cov_dirs = root.normal(size=(len(config.cardinalities), D))
    w = np.asarray(config.effects, dtype=np.float64)
    base_click = _logit(config.base_click_rate)
    base_conv = _logit(config.base_conversion_rate)

    journeys, shares, probs = [], {}, {}
    for i in range(config.n_users):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([config.seed, 1, i])))
        ctx = rng.normal(size=D)
        T = int(min(config.max_len, 1 + rng.poisson(config.mean_length - 1)))
        logits = config.confounding * (affinity @ ctx)
        p_chan = np.exp(logits - logits.max())
        p_chan /= p_chan.sum()
        t0 = int(rng.integers(0, 86_400))
        tps, ts = [], t0
        for _ in range(T):
            k = int(rng.choice(K, p=p_chan))
            covs = []
            for f, card in enumerate(config.cardinalities):
                u = cov_dirs[f] @ ctx + config.covariate_noise * rng.normal()
                # map a standard-normal-ish score onto card equal-probability bins
                q = 0.5 * (1.0 + math.erf(u / math.sqrt(2.0 * (1.0 + config.covariate_noise**2))))
                covs.append(str(min(card - 1, int(q * card))))
            p_click = _sigmoid(base_click + config.context_click * (click_dir @ ctx) + w[k] * config.effect_scale)
            click = int(rng.random() < p_click)
            cost = float(rng.gamma(2.0, config.mean_cost / 2.0))
            ts += int(rng.integers(1, 3600))
            tps.append(Touchpoint(tuple(covs), k, click, cost, ts))
        chans = [tp.channel for tp in tps]
        logit = (
            base_conv
            + config.effect_scale * w[chans].sum()
            + config.context_conversion * (conv_dir @ ctx)
            + config.conversion_noise * rng.normal()
        )
        p_conv = _sigmoid(logit)
        y = int(rng.random() < p_conv)
        jid = f"u{i}#0"
        journeys.append(Journey(jid, f"u{i}", tuple(tps), y))
        shares[jid] = _shares(w, chans)
        probs[jid] = p_conv

    truth = GroundTruth(
        effects=[float(x) for x in w],
        shares=shares,
        conversion_prob=probs,
        params={
            "config": _config_dict(config),
            "affinity": affinity.tolist(),
            "click_direction": click_dir.tolist(),
            "conversion_direction": conv_dir.tolist(),
            "covariate_directions": cov_dirs.tolist(),
        },
    )
    return journeys, truth


def _shares(w: np.ndarray, chans: Sequence[int]) -> list[float]:
    contrib = w[list(chans)]
    total = contrib.sum()
    if total <= 0:
        return [1.0 / len(chans)] * len(chans)
    return (contrib / total).tolist()


def _config_dict(config: SyntheticConfig) -> dict:
    d = asdict(config)
    d["cardinalities"] = list(d["cardinalities"])
    d["effects"] = list(d["effects"])
    return d


def ground_truth_attribution(truth: GroundTruth, journey: Journey) -> np.ndarray:
    """Per-touchpoint share ``w[c_t] / sum_s w[c_s]`` recorded by the generator."""
    shares = truth.shares.get(journey.journey_id)
    if shares is None or len(shares) != len(journey):
        raise ValueError(f"journey {journey.journey_id} was not produced by this generator run")
    expected = _shares(np.asarray(truth.effects), journey.channels)
    if not np.allclose(expected, shares):
        raise ValueError(f"journey {journey.journey_id} channels disagree with the generator record")
    return np.asarray(shares)


# -- journey file --------------------------------------------------------

def journey_to_record(j: Journey) -> dict:
    return {
        "format_version": JOURNEY_FORMAT_VERSION,
        "journey_id": j.journey_id,
        "user_id": j.user_id,
        "y": j.y,
        "touchpoints": [
            {
                "covariates": list(tp.covariates),
                "channel": tp.channel,
                "click": tp.click,
                "cost": tp.cost,
                "timestamp": tp.timestamp,
            }
            for tp in j.touchpoints
        ],
    }


def journey_from_record(rec: dict) -> Journey:
    version = rec.get("format_version")
    if version != JOURNEY_FORMAT_VERSION:
        raise ValueError(f"unsupported journey format_version {version!r}")
    tps = tuple(
        Touchpoint(tuple(t["covariates"]), int(t["channel"]), int(t["click"]), float(t["cost"]), int(t["timestamp"]))
        for t in rec["touchpoints"]
    )
    return Journey(str(rec["journey_id"]), str(rec["user_id"]), tps, int(rec["y"]))


def write_journeys(path, journeys: Iterable[Journey]) -> None:
    with open(path, "w") as fh:
        for j in journeys:
            fh.write(json.dumps(journey_to_record(j), separators=(",", ":")) + "\n")


def read_journeys(path) -> list[Journey]:
    with open(path) as fh:
        return [journey_from_record(json.loads(line)) for line in fh if line.strip()]
