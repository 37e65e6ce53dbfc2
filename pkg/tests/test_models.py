import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_directional, check_op
from tcts import autodiff as ad
from tcts.models import (
    DecodeResult, ForecastModel, TransductionModel, attention_weights, attn, decode_incremental,
    encode_incremental, forecast, make_transduction_batch, visible_source, waitk_loss,
)

V = 8  # content vocabulary; the model adds one id for EOS


def small_model(seed=0, hidden=6, emb=5):
    return TransductionModel(V + 1, V + 1, emb_dim=emb, hidden=hidden, seed=seed)


tokens = st.lists(st.integers(0, V - 1), min_size=1, max_size=12)


# -- attention ---------------------------------------------------------------

def test_attn_single_key_returns_projected_value():
    rng = np.random.default_rng(0)
    wq, wk, wv = (rng.standard_normal((3, 3)) for _ in range(3))
    v = rng.standard_normal((1, 3))
    out = attn(rng.standard_normal(3), rng.standard_normal((1, 3)), v, wq, wk, wv)
    np.testing.assert_allclose(out.value, (v @ wv)[0], atol=1e-12)


def test_identical_keys_give_uniform_weights():
    rng = np.random.default_rng(1)
    wq, wk = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    keys = np.tile(rng.standard_normal(4), (5, 1))
    np.testing.assert_allclose(attention_weights(rng.standard_normal(4), keys, wq, wk), np.full(5, 0.2))


def test_attn_identity_projections_pick_matching_key():
    eye = np.eye(2)
    out = attn(np.array([10.0, 0.0]), np.eye(2), np.eye(2), eye, eye, eye)
    np.testing.assert_allclose(out.value, [1.0, 0.0], atol=1e-4)


def test_attn_rejects_empty_keys():
    eye = np.eye(2)
    with pytest.raises(ValueError, match="at least one key"):
        attn(np.ones(2), np.zeros((0, 2)), np.zeros((0, 2)), eye, eye, eye)


def test_attn_gradients():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        # moderate scale keeps the softmax off its flat tails, where the
        # query/key gradients shrink to rounding noise
        arrays = [0.5 * rng.standard_normal(3), 0.5 * rng.standard_normal((4, 3)), rng.standard_normal((4, 3)),
                  rng.standard_normal((3, 3)), rng.standard_normal((3, 3)), rng.standard_normal((3, 3))]
        worst = max(worst, check_op(attn, arrays, rng))
    assert worst <= 1e-4


# -- incremental encoder -----------------------------------------------------

@settings(max_examples=40)
@given(x=tokens, cut=st.integers(1, 12))
def test_encoder_prefix_is_bit_identical(x, cut):
    model = small_model()
    cut = min(cut, len(x))
    full = encode_incremental(model, x)
    np.testing.assert_array_equal(full[:cut], encode_incremental(model, x[:cut]))


def test_single_token_gives_one_state():
    assert encode_incremental(small_model(), [3]).shape == (1, 6)


def test_empty_source_rejected():
    with pytest.raises(ValueError, match="empty"):
        encode_incremental(small_model(), [])


def test_self_attention_covers_only_the_prefix():
    _, weights = encode_incremental(small_model(), [1, 2, 3, 4, 5], return_weights=True)
    for t, w in enumerate(weights):
        assert len(w) == t + 1
        assert math.isclose(w.sum(), 1.0, rel_tol=1e-12)


@settings(max_examples=25)
@given(x=tokens)
def test_batched_encoder_matches_incremental(x):
    model = small_model()
    src = np.array([x + [model.src_eos]])
    with ad.no_grad():
        batched = model.encode(src).value[0]
    np.testing.assert_allclose(batched, model.encode_incremental(x), atol=1e-12)


@settings(max_examples=25)
@given(x=tokens, tail=tokens, cut=st.integers(1, 12))
def test_batched_encoder_is_causal(x, tail, cut):
    model = small_model()
    cut = min(cut, len(x))
    a = x
    b = x[:cut] + tail
    n = max(len(a), len(b))
    pad = lambda s: s + [model.src_eos] * (n + 1 - len(s))
    with ad.no_grad():
        ha = model.encode(np.array([pad(a)])).value[0]
        hb = model.encode(np.array([pad(b)])).value[0]
    np.testing.assert_array_equal(ha[:cut], hb[:cut])


# -- wait-m loss -------------------------------------------------------------

def incremental_nll(model, x, y, m):
    """Teacher-forced NLL through the step-by-step inference path."""
    enc = model.encode_incremental(x)
    h = np.zeros((1, model.hidden))
    prev, total = model.eos_id, 0.0
    for t, tok in enumerate(y, start=1):
        vis = int(visible_source(np.array(t), np.array(m), np.array(len(x))))
        h, lp = model._decoder_step(prev, h, enc, vis)
        total -= lp[tok]
        prev = tok
    return total


@settings(max_examples=40)
@given(x=tokens, y=tokens, m=st.integers(1, 15))
def test_waitk_loss_matches_incremental_path(x, y, m):
    model = small_model(seed=3)
    with ad.no_grad():
        batched = waitk_loss(model, x, y, m).item()
    assert batched == pytest.approx(incremental_nll(model, x, y, m), rel=1e-10, abs=1e-10)


@settings(max_examples=30)
@given(x=tokens, y=tokens, extra=st.integers(0, 10))
def test_wait_beyond_source_is_full_attention(x, y, extra):
    model = small_model(seed=4)
    with ad.no_grad():
        a = waitk_loss(model, x, y, len(x)).item()
        b = waitk_loss(model, x, y, len(x) + extra).item()
    assert a == b


@settings(max_examples=30)
@given(x=tokens, tail=tokens, y=tokens, m=st.integers(1, 6))
def test_hidden_source_does_not_affect_step(x, tail, y, m):
    """Changing source positions after t+m-1 leaves step t's log-prob unchanged."""
    model = small_model(seed=5)
    t = 1
    seen = min(t + m - 1, len(x))
    if seen >= len(x):
        return
    x2 = x[:seen] + tail
    with ad.no_grad():
        lp1 = model.token_logprobs(make_transduction_batch([(x, y)], [m], model.src_eos)).value[0, 0]
        lp2 = model.token_logprobs(make_transduction_batch([(x2, y)], [m], model.src_eos)).value[0, 0]
    assert lp1 == lp2


def test_uniform_output_layer_gives_log_vocab_loss():
    model = small_model()
    model.params["out.w"].value[:] = 0.0
    model.params["out.b"].value[:] = 0.0
    y = [1, 2, 3, 4, 5]
    with ad.no_grad():
        loss = waitk_loss(model, [0, 1, 2], y, 2).item()
    assert loss == pytest.approx(len(y) * math.log(V + 1), abs=1e-9)


def test_waitk_loss_rejects_bad_inputs():
    model = small_model()
    with pytest.raises(ValueError, match="empty target"):
        waitk_loss(model, [1, 2], [], 1)
    with pytest.raises(ValueError, match="wait value"):
        waitk_loss(model, [1, 2], [1], 0)
    with pytest.raises(ValueError, match="outside vocabulary"):
        waitk_loss(model, [1, 99], [1], 1)


@pytest.mark.parametrize("m", [1, 2, 4])
def test_waitk_loss_gradient(m):
    rng = np.random.default_rng(10 + m)
    worst = 0.0
    for trial in range(100):
        model = small_model(seed=trial, hidden=4, emb=3)
        x = list(rng.integers(0, V, rng.integers(1, 6)))
        y = list(rng.integers(0, V + 1, rng.integers(1, 6)))
        worst = max(worst, check_directional(lambda: waitk_loss(model, x, y, m), model.parameters(), rng,
                                             directions=1))
    assert worst <= 1e-4


def test_batch_loss_is_sum_of_single_losses():
    model = small_model(seed=6)
    pairs = [([1, 2, 3], [4, 5]), ([6], [1, 2, 3, 4]), ([0, 0, 1, 2, 3], [7])]
    with ad.no_grad():
        batch = model.example_losses(make_transduction_batch(pairs, [1, 2, 3], model.src_eos)).value
        singles = [waitk_loss(model, x, y, m).item() for (x, y), m in zip(pairs, [1, 2, 3])]
    np.testing.assert_allclose(batch, singles, rtol=1e-12)


def test_visible_source_examples():
    # L=4: wait-2 reads 2,3,4 then the EOS position joins at t=3
    assert list(visible_source(np.arange(1, 6), 2, 4)) == [2, 3, 5, 5, 5]


# -- decoding ----------------------------------------------------------------

@settings(max_examples=20)
@given(x=tokens, extra=st.integers(0, 5))
def test_full_wait_reads_everything_first(x, extra):
    res = decode_incremental(small_model(seed=7), x, len(x) + extra)
    assert all(d == len(x) for d in res.delays)


@settings(max_examples=20)
@given(x=tokens, k=st.integers(1, 6))
def test_delays_follow_wait_schedule(x, k):
    res = decode_incremental(small_model(seed=8), x, k)
    assert res.delays == [min(t + k - 1, len(x)) for t in range(1, len(res.tokens) + 1)]
    assert len(res.tokens) <= 2 * len(x) + 8


def greedy_via_batched(model, x, k):
    """Independent greedy decoder: re-scores the growing prefix with the training path."""
    out = []
    while len(out) < 2 * len(x) + 8:
        batch = make_transduction_batch([(x, out + [0])], [k], model.src_eos)
        with ad.no_grad():
            lp = model.vocab_logprobs(batch).value[0, -1]
        tok = int(np.argmax(lp))
        if tok == model.eos_id:
            break
        out.append(tok)
    return out


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("k", [1, 2, 3, 20])
def test_greedy_decode_matches_batched_oracle(seed, k):
    model = small_model(seed=seed, hidden=8)
    x = list(np.random.default_rng(seed).integers(0, V, 6))
    assert decode_incremental(model, x, k, beam=1).tokens == greedy_via_batched(model, x, k)


def test_beam_returns_valid_result():
    model = small_model(seed=9)
    res = decode_incremental(model, [1, 2, 3, 4], 2, beam=4)
    assert isinstance(res, DecodeResult)
    assert all(0 <= t < V for t in res.tokens)


def test_decode_rejects_bad_arguments():
    with pytest.raises(ValueError):
        decode_incremental(small_model(), [1, 2], 0)
    with pytest.raises(ValueError):
        decode_incremental(small_model(), [1, 2], 1, beam=0)


def test_state_dict_round_trip_reproduces_scores():
    a, b = small_model(seed=1), small_model(seed=2)
    b.load_state_dict(a.state_dict())
    assert a.fingerprint() == b.fingerprint()
    with ad.no_grad():
        assert waitk_loss(a, [1, 2, 3], [3, 2], 1).item() == waitk_loss(b, [1, 2, 3], [3, 2], 1).item()


def test_load_state_dict_checks_shapes():
    a = small_model(hidden=6)
    with pytest.raises(ad.ShapeError, match="checkpoint shape"):
        a.load_state_dict(small_model(hidden=7).state_dict())


# -- forecasting -------------------------------------------------------------

def test_zero_head_predicts_zero():
    model = ForecastModel(window=10, hidden=4, seed=0)
    model.params["head.w"].value[:] = 0.0
    model.params["head.b"].value[:] = 0.0
    assert forecast(model, np.random.default_rng(0).standard_normal((10, 5))) == 0.0


def test_forecast_is_a_pure_function_of_the_window():
    model = ForecastModel(window=10, hidden=4, n_tasks=3, seed=1)
    w = np.random.default_rng(1).standard_normal((10, 5))
    before = model.fingerprint()
    assert forecast(model, w, 2) == forecast(model, w.copy(), 2)
    assert model.fingerprint() == before
    with ad.no_grad():
        batched = model.predict(np.stack([w, w]))
    assert batched.value[0, 2] == batched.value[1, 2] == forecast(model, w, 2)


def test_forecast_rejects_bad_windows():
    model = ForecastModel(window=10, hidden=4)
    with pytest.raises(ad.ShapeError):
        forecast(model, np.zeros((9, 5)))
    bad = np.zeros((10, 5))
    bad[3, 1] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        forecast(model, bad)


def test_forecast_gradient():
    rng = np.random.default_rng(3)
    model = ForecastModel(window=4, hidden=3, layers=2, n_tasks=2, seed=3)
    w = rng.standard_normal((2, 4, 5))
    target = rng.standard_normal((2, 2))

    def loss():
        d = ad.sub(model.predict(w), target)
        return ad.sum_(ad.mul(d, d))

    assert check_directional(loss, model.parameters(), rng, directions=5) <= 1e-4


def test_forecast_learns_mean_of_last_column():
    rng = np.random.default_rng(4)
    model = ForecastModel(window=5, hidden=8, layers=1, seed=4)
    X = rng.uniform(-1, 1, (256, 5, 5))
    y = X[:, :, -1].mean(axis=1, keepdims=True)
    opt = ad.Adam(model.parameters(), lr=0.01)
    for _ in range(600):
        with ad.Graph():
            d = ad.sub(model.predict(X), y)
            loss = ad.mean(ad.mul(d, d))
            ad.zero_grad(model.parameters())
            ad.backward(loss)
        opt.step()
    with ad.no_grad():
        mse = float(np.mean((model.predict(X).value - y) ** 2))
    assert mse < 1e-3
