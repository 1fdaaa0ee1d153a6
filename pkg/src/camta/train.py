"""Mini-batch Adam training, grid search and training reports."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from camta.data import Journey
from camta.metrics import auc
from camta.model import Hyperparams, forward, init_params, loss, make_batch

logger = logging.getLogger(__name__)

# grid keys that belong to TrainConfig rather than Hyperparams
TRAIN_KEYS = ("learning_rate", "batch_size")

# validation quantity minimised when picking the epoch to return:
# "prediction" = L_z + beta * L_y, "total" = L_z - lam * L_c + beta * L_y
SELECTION_KEYS = ("prediction", "total")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 50
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 0
    eval_batch_size: int = 1024
    selection: str = "prediction"
    grid: dict[str, list] = field(default_factory=dict)

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.selection not in SELECTION_KEYS:
            raise ValueError(f"selection must be one of {SELECTION_KEYS}")


class Adam:
    """Bias-corrected Adam over a dict of arrays."""

    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


@dataclass
class EpochRecord:
    epoch: int
    train: dict[str, float]
    validation: dict[str, float]
    val_auc: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    initial_validation: dict[str, float] = field(default_factory=dict)
    n_steps: int = 0

    def to_dict(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "n_steps": self.n_steps,
            "initial_validation": self.initial_validation,
            "epochs": [asdict(r) for r in self.records],
        }


def evaluate_loss(params, journeys: Sequence[Journey], hp: Hyperparams, batch_size: int = 1024):
    """Eval-mode loss components averaged over journeys, plus conversion scores."""
    sums = {"L_c": 0.0, "L_z": 0.0, "L_y": 0.0}
    scores = []
    for start in range(0, len(journeys), batch_size):
        chunk = journeys[start : start + batch_size]
        out = forward(params, make_batch(chunk, hp), hp, train=False)
        parts = loss(out, hp)
        n = len(chunk)
        sums["L_c"] += parts.channel * n
        sums["L_z"] += parts.click * n
        sums["L_y"] += parts.conversion * n
        scores.append(out.graph.value(out.conversion)[:, 0])
    n = max(len(journeys), 1)
    comp = {k: v / n for k, v in sums.items()}
    comp["L_r"] = comp["L_z"] - hp.lam * comp["L_c"]
    comp["total"] = comp["L_r"] + hp.beta * comp["L_y"]
    comp["prediction"] = comp["L_z"] + hp.beta * comp["L_y"]
    return comp, np.concatenate(scores) if scores else np.zeros(0)


def _safe_auc(scores, journeys) -> float:
    try:
        return auc(scores, [j.y for j in journeys])
    except ValueError:
        return float("nan")


def train(
    train_set: Sequence[Journey],
    validation_set: Sequence[Journey],
    hp: Hyperparams,
    config: TrainConfig,
    init: dict[str, np.ndarray] | None = None,
):
    """Train with Adam; return the parameters of the best validation epoch and the history.

    The best epoch minimises the validation quantity named by
    ``config.selection``. The default leaves out the ``-lam * L_c`` term: it
    is smallest when the channel head is weakest, which says nothing about
    predictive quality. Every random draw (init, shuffles, dropout) derives
    from ``config.seed``.
    """
    config.validate()
    if not train_set:
        raise ValueError("empty training set")
    val = list(validation_set) if validation_set else list(train_set)
    rng = np.random.default_rng(config.seed)
    params = init if init is not None else init_params(hp, seed=config.seed)
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    opt = Adam(params, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)

    history = TrainHistory()
    init_comp, _ = evaluate_loss(params, val, hp, config.eval_batch_size)
    history.initial_validation = init_comp
    key = config.selection
    best = (math.inf, None)
    n = len(train_set)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        sums = {"L_c": 0.0, "L_z": 0.0, "L_y": 0.0}
        for b_idx, start in enumerate(range(0, n, config.batch_size)):
            chunk = [train_set[i] for i in order[start : start + config.batch_size]]
            batch = make_batch(chunk, hp)
            out = forward(params, batch, hp, train=True, dropout_seed=int(rng.integers(2**63)))
            try:
                parts = loss(out, hp)
            except FloatingPointError as exc:
                raise FloatingPointError(f"epoch {epoch}, batch {b_idx}: {exc}") from exc
            grads = out.graph.backward(parts.total)
            gnorm = clip_by_global_norm(grads, config.clip_norm)
            if not math.isfinite(gnorm):
                raise FloatingPointError(f"epoch {epoch}, batch {b_idx}: non-finite gradient")
            opt.step(params, grads)
            history.n_steps += 1
            sums["L_c"] += parts.channel * len(chunk)
            sums["L_z"] += parts.click * len(chunk)
            sums["L_y"] += parts.conversion * len(chunk)
        tr = {k: v / n for k, v in sums.items()}
        tr["L_r"] = tr["L_z"] - hp.lam * tr["L_c"]
        tr["total"] = tr["L_r"] + hp.beta * tr["L_y"]
        tr["prediction"] = tr["L_z"] + hp.beta * tr["L_y"]
        comp, scores = evaluate_loss(params, val, hp, config.eval_batch_size)
        rec = EpochRecord(epoch, tr, comp, _safe_auc(scores, val))
        history.records.append(rec)
        logger.info(
            "epoch %d train total %.4f val total %.4f val L_y %.4f val AUC %.4f",
            epoch, tr["total"], comp["total"], comp["L_y"], rec.val_auc,
        )
        if comp[key] < best[0]:
            best = (comp[key], {k: v.copy() for k, v in params.items()})
            history.best_epoch = epoch
    return best[1], history


@dataclass
class GridPoint:
    settings: dict
    val_total: float
    val_auc: float
    best_epoch: int
    error: str | None = None


def expand_grid(grid: dict[str, list]) -> list[dict]:
    """Cartesian product of grid lists, in listed order. A ``lam_beta`` key holds pairs."""
    if not grid:
        return [{}]
    keys = list(grid)
    points = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        point = {}
        for k, v in zip(keys, combo):
            if k == "lam_beta":
                point["lam"], point["beta"] = v
            else:
                point[k] = v
        points.append(point)
    return points


def grid_search(train_set, validation_set, base_hp: Hyperparams, grid: dict[str, list], config: TrainConfig):
    """Train every grid point; pick minimum validation total, then higher AUC, then first listed.

    Returns ``(best_hp, best_config, best_params, best_history, leaderboard)``. Failed
    points are kept on the leaderboard with their error.
    """
    points = expand_grid(grid)
    if not points:
        raise ValueError("empty grid")
    leaderboard: list[GridPoint] = []
    best = None
    for settings in points:
        hp_kw = {k: v for k, v in settings.items() if k not in TRAIN_KEYS}
        cfg_kw = {k: v for k, v in settings.items() if k in TRAIN_KEYS}
        try:
            hp = Hyperparams(**{**base_hp.to_dict(), **hp_kw})
            cfg = TrainConfig(**{**asdict(config), **cfg_kw, "grid": {}})
            params, hist = train(train_set, validation_set, hp, cfg)
        except (ValueError, FloatingPointError) as exc:
            logger.warning("grid point %s failed: %s", settings, exc)
            leaderboard.append(GridPoint(settings, math.inf, float("nan"), 0, str(exc)))
            continue
        rec = hist.records[hist.best_epoch - 1]
        point = GridPoint(settings, rec.validation["total"], rec.val_auc, hist.best_epoch)
        leaderboard.append(point)
        key = (point.val_total, -(point.val_auc if math.isfinite(point.val_auc) else -math.inf))
        if best is None or key < best[0]:
            best = (key, hp, cfg, params, hist)
    if best is None:
        raise RuntimeError("every grid point failed")
    _, hp, cfg, params, hist = best
    return hp, cfg, params, hist, leaderboard
