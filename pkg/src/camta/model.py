"""Recurrent attention network for multi-touch attribution.

Per touchpoint: an LSTM summarises history into ``s_t``; a balancing map
turns it into ``r_t``; a channel classifier sees ``r_t`` through a gradient
reversal node (so the representation is pushed to hide the channel); a
click head predicts the next click from ``[r_t, c_t]``; and an attention
layer over ``v_t = tanh(W_v [r_t, c_t, z_hat] + b_v)`` yields per-touchpoint
credits ``a_t`` and the conversion probability.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from camta.autodiff import Graph
from camta.data import Journey

CHECKPOINT_FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"CAMTA-CHECKPOINT\n"

ATTENTION_INPUTS = ("concat", "click_only")


@dataclass
class Hyperparams:
    n_channels: int
    cardinalities: tuple[int, ...]
    embedding_size: int = 64
    hidden_size: int = 64
    representation_size: int = 32
    head_size: int = 64
    dropout: float = 0.1
    lam: float = 5.0
    beta: float = 5.0
    max_len: int = 20
    attention_input: str = "concat"
    linear_phi: bool = False

    def __post_init__(self):
        self.cardinalities = tuple(int(c) for c in self.cardinalities)
        self.validate()

    def validate(self) -> None:
        sizes = ("embedding_size", "hidden_size", "representation_size", "head_size", "max_len", "n_channels")
        for name in sizes:
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.cardinalities or min(self.cardinalities) < 1:
            raise ValueError("cardinalities must be a nonempty list of positive sizes")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.lam < 0 or self.beta < 0:
            raise ValueError("lam and beta must be >= 0")
        if self.attention_input not in ATTENTION_INPUTS:
            raise ValueError(f"attention_input must be one of {ATTENTION_INPUTS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cardinalities"] = list(self.cardinalities)
        return d

    @property
    def lstm_input_size(self) -> int:
        return len(self.cardinalities) * self.embedding_size + self.n_channels + 1

    @property
    def attention_input_size(self) -> int:
        if self.attention_input == "click_only":
            return 1
        return self.representation_size + self.n_channels + 1


def param_shapes(hp: Hyperparams) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of every trainable array."""
    H, R, M, K = hp.hidden_size, hp.representation_size, hp.head_size, hp.n_channels
    shapes: dict[str, tuple[int, ...]] = {}
    for f, card in enumerate(hp.cardinalities):
        shapes[f"emb_{f}"] = (card, hp.embedding_size)
    shapes.update(
        {
            "lstm_W": (hp.lstm_input_size + H, 4 * H),
            "lstm_b": (4 * H,),
            "phi_W": (H, R),
            "phi_b": (R,),
            "chan_W1": (R, M),
            "chan_b1": (M,),
            "chan_W2": (M, K),
            "chan_b2": (K,),
            "click_W1": (R + K, M),
            "click_b1": (M,),
            "click_W2": (M, 1),
            "click_b2": (1,),
            "att_W": (hp.attention_input_size, M),
            "att_b": (M,),
            "att_u": (M, 1),
            "conv_W": (M, 1),
            "conv_b": (1,),
        }
    )
    return shapes


def init_params(hp: Hyperparams, seed: int = 0) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(hp).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            fan_in, fan_out = shape
            a = math.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-a, a, size=shape)
    return params


# -- batching -------------------------------------------------------------

@dataclass
class Batch:
    covariates: np.ndarray  # (B, T, F) int
    channels: np.ndarray  # (B, T) int
    clicks: np.ndarray  # (B, T) float
    mask: np.ndarray  # (B, T) bool
    y: np.ndarray  # (B,) float
    lengths: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


def make_batch(journeys: Sequence[Journey], hp: Hyperparams) -> Batch:
    """Pad ``journeys`` to a common length, validating them against ``hp``."""
    if not journeys:
        raise ValueError("empty batch")
    F = len(hp.cardinalities)
    lengths = np.array([len(j) for j in journeys])
    for j, n in zip(journeys, lengths):
        if not 1 <= n <= hp.max_len:
            raise ValueError(f"journey {j.journey_id}: length {n} outside [1, {hp.max_len}]")
    B, T = len(journeys), int(lengths.max())
    cov = np.zeros((B, T, F), dtype=np.int64)
    chan = np.zeros((B, T), dtype=np.int64)
    clicks = np.zeros((B, T))
    mask = np.zeros((B, T), dtype=bool)
    for b, j in enumerate(journeys):
        n = len(j)
        c = np.array(j.channels, dtype=np.int64)
        if c.min() < 0 or c.max() >= hp.n_channels:
            raise ValueError(f"journey {j.journey_id}: channel index outside [0, {hp.n_channels})")
        x = np.array([tp.covariates for tp in j.touchpoints], dtype=np.int64).reshape(n, -1)
        if x.shape[1] != F:
            raise ValueError(f"journey {j.journey_id}: {x.shape[1]} covariates, expected {F}")
        if x.size and (x.min() < 0 or (x >= np.array(hp.cardinalities)).any()):
            raise ValueError(f"journey {j.journey_id}: covariate index outside vocabulary")
        cov[b, :n] = x
        chan[b, :n] = c
        clicks[b, :n] = j.clicks
        mask[b, :n] = True
    y = np.array([j.y for j in journeys], dtype=np.float64)
    return Batch(cov, chan, clicks, mask, y, lengths)


# -- forward ----------------------------------------------------------------

@dataclass
class ForwardOutputs:
    graph: Graph
    batch: Batch
    propensity: list[int]  # node ids, (B, K) per step
    click_prob: list[int]  # (B, 1) per step
    attention: int  # (B, T)
    conversion: int  # (B, 1)
    representation: list[int] = field(default_factory=list)

    def values(self) -> dict[str, np.ndarray]:
        g = self.graph
        return {
            "attention": g.value(self.attention).copy(),
            "click_prob": np.concatenate([g.value(n) for n in self.click_prob], axis=1),
            "propensity": np.stack([g.value(n) for n in self.propensity], axis=1),
            "conversion": g.value(self.conversion)[:, 0].copy(),
        }


def _linear(g: Graph, x: int, W: int, b: int) -> int:
    return g.add(g.matmul(x, W), b)


def forward(
    params: dict[str, np.ndarray],
    batch: Batch,
    hp: Hyperparams,
    train: bool = False,
    dropout_seed: int | None = None,
    lam: float | None = None,
) -> ForwardOutputs:
    """Build the computation graph for ``batch``.

    Padding steps are computed (the recurrence is causal so they never feed
    valid steps) but excluded from the attention softmax and all losses.
    """
    lam = hp.lam if lam is None else lam
    g = Graph()
    P = {name: g.param(name, arr) for name, arr in params.items()}
    rng = np.random.default_rng(dropout_seed) if train else None
    B, T = batch.channels.shape
    H, K = hp.hidden_size, hp.n_channels
    onehot = np.eye(K)[batch.channels]  # (B, T, K)

    h_prev = g.const(np.zeros((B, H)))
    c_prev = g.const(np.zeros((B, H)))
    props, clicks, reps, v_nodes, scores = [], [], [], [], []
    for t in range(T):
        embs = [g.embedding_lookup(P[f"emb_{f}"], batch.covariates[:, t, f]) for f in range(len(hp.cardinalities))]
        prev_c = onehot[:, t - 1] if t > 0 else np.zeros((B, K))
        prev_z = batch.clicks[:, t - 1 : t] if t > 0 else np.zeros((B, 1))
        x_in = g.concat(embs + [g.const(prev_c), g.const(prev_z), h_prev])
        gates = _linear(g, x_in, P["lstm_W"], P["lstm_b"])
        i_g = g.sigmoid(g.take_slice(gates, 0, H))
        f_g = g.sigmoid(g.take_slice(gates, H, 2 * H))
        o_g = g.sigmoid(g.take_slice(gates, 2 * H, 3 * H))
        cand = g.tanh(g.take_slice(gates, 3 * H, 4 * H))
        c_prev = g.add(g.mul(f_g, c_prev), g.mul(i_g, cand))
        h_prev = g.mul(o_g, g.tanh(c_prev))

        s_t = g.dropout(h_prev, hp.dropout, rng=rng, train=train) if train and hp.dropout > 0 else h_prev
        r_t = _linear(g, s_t, P["phi_W"], P["phi_b"])
        if not hp.linear_phi:
            r_t = g.tanh(r_t)
        reps.append(r_t)

        rev = g.grad_reverse(r_t, lam)
        chan_hidden = g.tanh(_linear(g, rev, P["chan_W1"], P["chan_b1"]))
        props.append(g.masked_softmax(_linear(g, chan_hidden, P["chan_W2"], P["chan_b2"])))

        c_t = g.const(onehot[:, t])
        click_hidden = g.tanh(_linear(g, g.concat([r_t, c_t]), P["click_W1"], P["click_b1"]))
        z_hat = g.sigmoid(_linear(g, click_hidden, P["click_W2"], P["click_b2"]))
        clicks.append(z_hat)

        att_in = z_hat if hp.attention_input == "click_only" else g.concat([r_t, c_t, z_hat])
        v_t = g.tanh(_linear(g, att_in, P["att_W"], P["att_b"]))
        v_nodes.append(v_t)
        scores.append(g.matmul(v_t, P["att_u"]))

    attention = g.masked_softmax(g.concat(scores), mask=batch.mask)
    h = None
    for t, v_t in enumerate(v_nodes):
        term = g.mul(g.take(attention, t), v_t)
        h = term if h is None else g.add(h, term)
    conversion = g.sigmoid(_linear(g, h, P["conv_W"], P["conv_b"]))
    return ForwardOutputs(g, batch, props, clicks, attention, conversion, reps)


# -- loss ---------------------------------------------------------------

@dataclass
class LossParts:
    total: int  # node id of the training scalar
    channel: float  # mean over journeys of sum_t L_{t,c}
    click: float
    conversion: float
    representation: float  # sum_t L_z - lam * sum_t L_c
    objective: float  # L_r + beta * L_y
    scalar: float  # value of the training scalar

    def as_dict(self) -> dict[str, float]:
        return {
            "L_c": self.channel,
            "L_z": self.click,
            "L_y": self.conversion,
            "L_r": self.representation,
            "total": self.objective,
        }


def loss(out: ForwardOutputs, hp: Hyperparams, lam: float | None = None, beta: float | None = None) -> LossParts:
    """Attach the training scalar ``mean_B[sum_t (L_z + L_c) + beta * L_y]``.

    The sign flip on the channel loss for the representation happens in the
    gradient reversal node, so the scalar itself adds ``L_c``. The reported
    objective uses ``L_r = sum_t L_z - lam * sum_t L_c``.
    """
    lam = hp.lam if lam is None else lam
    beta = hp.beta if beta is None else beta
    g, batch = out.graph, out.batch
    B = len(batch)
    K = hp.n_channels
    onehot = np.eye(K)[batch.channels]
    step_mask = batch.mask.astype(np.float64)

    lc_terms, lz_terms = [], []
    for t, (p_node, z_node) in enumerate(zip(out.propensity, out.click_prob)):
        m = g.const(step_mask[:, t])
        lc = g.mul(g.categorical_cross_entropy(p_node, onehot[:, t]), m)
        lz = g.mul(g.sum(g.binary_cross_entropy(z_node, batch.clicks[:, t : t + 1]), axis=1), m)
        lc_terms.append(g.sum(lc))
        lz_terms.append(g.sum(lz))
    lc_sum = _sum_nodes(g, lc_terms)
    lz_sum = _sum_nodes(g, lz_terms)
    ly_sum = g.sum(g.binary_cross_entropy(out.conversion, batch.y[:, None]))

    total = g.scalar_mul(g.add(g.add(lz_sum, lc_sum), g.scalar_mul(ly_sum, beta)), 1.0 / B)
    L_c = float(g.value(lc_sum)) / B
    L_z = float(g.value(lz_sum)) / B
    L_y = float(g.value(ly_sum)) / B
    for name, val in (("L_c", L_c), ("L_z", L_z), ("L_y", L_y)):
        if not math.isfinite(val):
            raise FloatingPointError(f"loss component {name} is not finite")
    L_r = L_z - lam * L_c
    return LossParts(total, L_c, L_z, L_y, L_r, L_r + beta * L_y, float(g.value(total)))


def _sum_nodes(g: Graph, nodes: list[int]) -> int:
    acc = nodes[0]
    for n in nodes[1:]:
        acc = g.add(acc, n)
    return acc


def loss_and_grads(params, journeys_or_batch, hp: Hyperparams, train=False, dropout_seed=None):
    """Convenience: forward + loss + backward; returns ``(LossParts, grads)``."""
    batch = journeys_or_batch if isinstance(journeys_or_batch, Batch) else make_batch(journeys_or_batch, hp)
    out = forward(params, batch, hp, train=train, dropout_seed=dropout_seed)
    parts = loss(out, hp)
    grads = out.graph.backward(parts.total)
    return parts, grads


# -- attribution ----------------------------------------------------------

@dataclass
class AttributionResult:
    journey_id: str
    attention: np.ndarray  # (T,)
    click_prob: np.ndarray  # (T,)
    propensity: np.ndarray  # (T, K)
    conversion: float


def attribute(params, journeys: Sequence[Journey], hp: Hyperparams, batch_size: int = 512) -> list[AttributionResult]:
    """Eval-mode forward pass; per-journey attention credits and predictions."""
    results = []
    for start in range(0, len(journeys), batch_size):
        chunk = journeys[start : start + batch_size]
        batch = make_batch(chunk, hp)
        vals = forward(params, batch, hp, train=False).values()
        for b, j in enumerate(chunk):
            n = len(j)
            results.append(
                AttributionResult(
                    j.journey_id,
                    vals["attention"][b, :n].copy(),
                    vals["click_prob"][b, :n].copy(),
                    vals["propensity"][b, :n].copy(),
                    float(vals["conversion"][b]),
                )
            )
    return results


# -- checkpoint -----------------------------------------------------------

def save_checkpoint(path, params: dict[str, np.ndarray], hp: Hyperparams, vocab_hash: str = "") -> None:
    """Write a JSON header line followed by little-endian float64 arrays in header order."""
    names = list(param_shapes(hp))
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "hyperparams": hp.to_dict(),
        "vocab_hash": vocab_hash,
        "params": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], Hyperparams, str]:
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path} is not a checkpoint file")
    rest = blob[len(CHECKPOINT_MAGIC) :]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {header.get('format_version')!r}")
    hp = Hyperparams(**header["hyperparams"])
    offset = nl + 1
    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(rest, dtype="<f8", count=count, offset=offset).reshape(shape)
        params[entry["name"]] = arr.astype(np.float64)
        offset += 8 * count
    if offset != len(rest):
        raise ValueError(f"{path}: {len(rest) - offset} trailing bytes after parameter data")
    return params, hp, header.get("vocab_hash", "")


CHANNEL_HEAD = ("chan_W1", "chan_b1", "chan_W2", "chan_b2")


def check_gradients(params, journeys, hp: Hyperparams, step: float = 1e-6) -> float:
    """Finite-difference check of the min-max gradients, dropout off.

    Channel-head parameters descend on the training scalar, so their
    gradient is checked against it. Everything else receives the reversed
    channel gradient, which makes it the gradient of the reported objective
    ``L_z - lam * L_c + beta * L_y``; those are checked against that.
    """
    from camta.autodiff import grad_check

    hp = Hyperparams(**{**hp.to_dict(), "dropout": 0.0})
    batch = make_batch(journeys, hp)

    def run(p):
        out = forward(p, batch, hp)
        parts = loss(out, hp)
        return parts, out.graph.backward(parts.total)

    head = {k: params[k] for k in CHANNEL_HEAD}
    rest = {k: v for k, v in params.items() if k not in CHANNEL_HEAD}

    def head_fn(sub):
        parts, grads = run({**params, **sub})
        return parts.scalar, grads

    def rest_fn(sub):
        parts, grads = run({**params, **sub})
        return parts.objective, grads

    return max(grad_check(head_fn, head, step), grad_check(rest_fn, rest, step))
