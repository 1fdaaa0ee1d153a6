import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camta.data import Journey, Touchpoint
from camta.model import (
    CHANNEL_HEAD,
    Hyperparams,
    attribute,
    check_gradients,
    forward,
    init_params,
    load_checkpoint,
    loss,
    loss_and_grads,
    make_batch,
    param_shapes,
    save_checkpoint,
)

K = 3
CARDS = (4, 5)


def small_hp(**kw):
    base = dict(
        n_channels=K, cardinalities=CARDS, embedding_size=3, hidden_size=4,
        representation_size=3, head_size=5, dropout=0.0, max_len=6,
    )
    return Hyperparams(**{**base, **kw})


def make_journey(channels, clicks=None, y=0, jid="j", covs=None):
    clicks = clicks or [0] * len(channels)
    covs = covs or [(1 + t % 3, 1 + t % 4) for t in range(len(channels))]
    tps = tuple(Touchpoint(cv, c, z, 1.0, t) for t, (c, z, cv) in enumerate(zip(channels, clicks, covs)))
    return Journey(jid, "u", tps, y)


def random_journeys(n, seed=0, max_len=6):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        L = int(rng.integers(1, max_len + 1))
        out.append(
            make_journey(
                [int(c) for c in rng.integers(0, K, L)],
                [int(z) for z in rng.integers(0, 2, L)],
                int(rng.integers(0, 2)),
                f"j{i}",
                [(int(rng.integers(0, CARDS[0])), int(rng.integers(0, CARDS[1]))) for _ in range(L)],
            )
        )
    return out


def zero_params(hp):
    return {k: np.zeros(s) for k, s in param_shapes(hp).items()}


def test_init_deterministic_and_bounded():
    hp = small_hp()
    a, b = init_params(hp, 3), init_params(hp, 3)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert any(a[k].tobytes() != v.tobytes() for k, v in init_params(hp, 4).items() if a[k].ndim == 2)
    for name, arr in a.items():
        if arr.ndim == 1:
            assert not arr.any(), name
        else:
            fan_in, fan_out = arr.shape
            assert np.abs(arr).max() <= math.sqrt(6 / (fan_in + fan_out))


def test_single_touchpoint_gets_full_attention():
    hp = small_hp()
    vals = forward(init_params(hp, 0), make_batch([make_journey([2])], hp), hp).values()
    assert vals["attention"][0, 0] == 1.0


def test_zero_output_layer_predicts_half():
    hp = small_hp()
    p = init_params(hp, 1)
    p["conv_W"][:] = 0.0
    p["conv_b"][:] = 0.0
    vals = forward(p, make_batch(random_journeys(4), hp), hp).values()
    np.testing.assert_array_equal(vals["conversion"], 0.5)


def test_batch_padding_and_mask():
    hp = small_hp()
    batch = make_batch([make_journey([0, 1, 2]), make_journey([1])], hp)
    assert batch.channels.shape == (2, 3)
    assert list(batch.lengths) == [3, 1]
    np.testing.assert_array_equal(batch.mask, [[1, 1, 1], [1, 0, 0]])
    att = forward(init_params(hp, 0), batch, hp).values()["attention"]
    assert att[1, 1:].tolist() == [0.0, 0.0]
    np.testing.assert_allclose(att.sum(axis=1), 1.0)


def test_padding_does_not_change_outputs():
    hp = small_hp()
    p = init_params(hp, 2)
    short = make_journey([1, 0], [1, 0], jid="s")
    alone = attribute(p, [short], hp)[0]
    padded = attribute(p, [short, make_journey([0, 1, 2, 2, 1], jid="l")], hp)[0]
    np.testing.assert_allclose(padded.attention, alone.attention, atol=1e-14)
    assert padded.conversion == pytest.approx(alone.conversion, abs=1e-14)


def test_zero_parameters_give_uninformed_losses():
    hp = small_hp()
    j = make_journey([0, 1], [1, 0], y=1)
    out = forward(zero_params(hp), make_batch([j], hp), hp)
    parts = loss(out, hp)
    assert parts.click == pytest.approx(2 * math.log(2))
    assert parts.channel == pytest.approx(2 * math.log(K))
    assert parts.conversion == pytest.approx(math.log(2))
    assert parts.representation == pytest.approx(2 * math.log(2) - hp.lam * 2 * math.log(K))
    assert parts.objective == pytest.approx(parts.representation + hp.beta * math.log(2))


def test_click_loss_at_three_quarters():
    hp = small_hp()
    p = zero_params(hp)
    p["click_b2"][:] = math.log(3)  # sigmoid(ln 3) = 0.75
    parts = loss(forward(p, make_batch([make_journey([0], [1])], hp), hp), hp)
    assert parts.click == pytest.approx(-math.log(0.75))
    assert parts.click == pytest.approx(0.287682, abs=1e-6)


def test_uniform_propensity_costs_log_k():
    hp = small_hp()
    vals = forward(zero_params(hp), make_batch([make_journey([2])], hp), hp).values()
    np.testing.assert_allclose(vals["propensity"][0, 0], np.full(K, 1 / K))


def test_batch_order_does_not_matter():
    hp = small_hp()
    p = init_params(hp, 5)
    js = random_journeys(6, seed=1)
    order = [3, 0, 5, 1, 4, 2]
    a = {r.journey_id: r for r in attribute(p, js, hp)}
    b = {r.journey_id: r for r in attribute(p, [js[i] for i in order], hp)}
    for jid in a:
        np.testing.assert_allclose(a[jid].attention, b[jid].attention, atol=1e-14)
        assert a[jid].conversion == pytest.approx(b[jid].conversion, abs=1e-14)
    pa, _ = loss_and_grads(p, js, hp)
    pb, _ = loss_and_grads(p, [js[i] for i in order], hp)
    assert pa.scalar == pytest.approx(pb.scalar, abs=1e-12)


def test_eval_mode_ignores_dropout_seed():
    hp = small_hp(dropout=0.5)
    p = init_params(hp, 0)
    batch = make_batch(random_journeys(5), hp)
    a = forward(p, batch, hp, train=False, dropout_seed=1).values()
    b = forward(p, batch, hp, train=False, dropout_seed=2).values()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
    c = forward(p, batch, hp, train=True, dropout_seed=1).values()
    assert c["conversion"].tobytes() != a["conversion"].tobytes()


def test_reversal_strength_changes_upstream_gradients_only():
    hp = small_hp()
    p = init_params(hp, 0)
    batch = make_batch(random_journeys(4), hp)
    grads = {}
    for lam in (0.0, 5.0):
        out = forward(p, batch, hp, lam=lam)
        grads[lam] = out.graph.backward(loss(out, hp, lam=lam).total)
    for name in CHANNEL_HEAD + ("click_W1", "att_u", "conv_W"):
        np.testing.assert_allclose(grads[0.0][name], grads[5.0][name], atol=1e-14)
    assert not np.allclose(grads[0.0]["lstm_W"], grads[5.0]["lstm_W"])


@pytest.mark.parametrize("attention_input", ["concat", "click_only"])
@pytest.mark.parametrize("linear_phi", [False, True])
def test_gradients_match_finite_differences(attention_input, linear_phi):
    hp = small_hp(attention_input=attention_input, linear_phi=linear_phi, dropout=0.2)
    p = init_params(hp, 7)
    assert check_gradients(p, random_journeys(3, seed=2), hp) < 1e-5


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_attention_is_a_distribution_over_valid_steps(seed):
    hp = small_hp()
    js = random_journeys(5, seed=seed)
    for j, r in zip(js, attribute(init_params(hp, seed), js, hp)):
        assert r.attention.shape == (len(j),)
        assert (r.attention > 0).all()
        assert r.attention.sum() == pytest.approx(1.0)
        assert 0 < r.conversion < 1
        assert ((r.click_prob > 0) & (r.click_prob < 1)).all()


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    hp = small_hp(lam=2.5, attention_input="click_only")
    p = init_params(hp, 9)
    p["conv_b"][:] = 0.123
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, p, hp, "abc")
    q, hp2, vh = load_checkpoint(path)
    assert hp2 == hp and vh == "abc"
    assert list(q) == list(param_shapes(hp))
    for k in p:
        assert q[k].tobytes() == p[k].tobytes()
    js = random_journeys(4)
    a, b = attribute(p, js, hp), attribute(q, js, hp2)
    for ra, rb in zip(a, b):
        assert ra.attention.tobytes() == rb.attention.tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(b"hello\n")
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(path)
    hp = small_hp()
    save_checkpoint(path, init_params(hp), hp)
    path.write_bytes(path.read_bytes() + b"\0" * 8)
    with pytest.raises(ValueError, match="trailing"):
        load_checkpoint(path)


@pytest.mark.parametrize(
    "journey,match",
    [
        (make_journey([0] * 7), "length"),
        (make_journey([3]), "channel"),
        (make_journey([0], covs=[(4, 0)]), "vocabulary"),
        (make_journey([0], covs=[(1,)]), "covariates"),
    ],
)
def test_make_batch_validation(journey, match):
    with pytest.raises(ValueError, match=match):
        make_batch([journey], small_hp())


def test_make_batch_empty_rejected():
    with pytest.raises(ValueError):
        make_batch([], small_hp())


@pytest.mark.parametrize(
    "kw",
    [{"hidden_size": 0}, {"dropout": 1.0}, {"lam": -1}, {"attention_input": "bogus"}, {"cardinalities": ()}],
)
def test_hyperparams_validation(kw):
    with pytest.raises(ValueError):
        small_hp(**kw)


def test_nonfinite_loss_raises():
    hp = small_hp()
    p = init_params(hp)
    p["conv_b"][:] = np.nan
    with pytest.raises(FloatingPointError, match="L_y"):
        loss_and_grads(p, random_journeys(2), hp)
