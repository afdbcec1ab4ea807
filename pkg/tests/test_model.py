import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lllab import autodiff as ad
from lllab.model import (LanguageModel, LogitTableModel, ModelConfig, forward_logits,
                         greedy_decode, greedy_decode_batch, log_probs_with_temperature,
                         top_k_sample, top_k_sample_batch)

V = 11


@pytest.fixture(scope="module")
def model():
    return LanguageModel(ModelConfig(V, n_layers=2, n_heads=2, d_model=16, context_len=12), seed=3)


def test_logit_shape(model):
    assert forward_logits(model, [3, 4, 5]).shape == (3, V)


def test_zero_embedding_head_gives_uniform_rows(model):
    m = model.copy()
    m.params["wte"].data[:] = 0.0
    probs = np.exp(log_probs_with_temperature(forward_logits(m, [1, 2, 3, 4]), 1.0))
    assert np.allclose(probs, 1.0 / V, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(toks=st.lists(st.integers(1, V - 1), min_size=1, max_size=10),
       extra=st.lists(st.integers(0, V - 1), min_size=1, max_size=2))
def test_causality_future_tokens_do_not_leak(model, toks, extra):
    a = forward_logits(model, toks)
    b = forward_logits(model, toks + extra)
    assert np.allclose(a, b[:len(toks)], atol=1e-12)


def test_right_padding_does_not_change_real_rows(model):
    batch = np.array([[3, 4, 5, 6], [7, 8, 0, 0]])
    logits = model.logits_numpy(batch)
    assert np.allclose(logits[1, :2], forward_logits(model, [7, 8]), atol=1e-12)


def test_input_validation(model):
    with pytest.raises(ValueError, match="context_len"):
        forward_logits(model, [1] * 13)
    with pytest.raises(ValueError, match="vocabulary"):
        forward_logits(model, [V])
    with pytest.raises(ValueError):
        forward_logits(model, [])


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(10, n_heads=3, d_model=16)


def test_save_load_round_trip(model, tmp_path):
    model.save(tmp_path / "m", {"tag": "x"})
    back, meta = LanguageModel.load(tmp_path / "m")
    assert meta["tag"] == "x"
    assert back.checksum() == model.checksum()
    assert np.array_equal(forward_logits(back, [1, 2]), forward_logits(model, [1, 2]))


def test_same_seed_same_init():
    cfg = ModelConfig(V, d_model=8, n_heads=2, context_len=8)
    assert LanguageModel(cfg, 1).checksum() == LanguageModel(cfg, 1).checksum()
    assert LanguageModel(cfg, 1).checksum() != LanguageModel(cfg, 2).checksum()


def test_full_model_gradient_matches_differences():
    m = LanguageModel(ModelConfig(7, n_layers=1, n_heads=2, d_model=4, context_len=6), seed=0)
    ids = np.array([[3, 4, 5, 6, 1]])
    params = m.parameters()

    def loss():
        logp = ad.log_softmax(m.forward(ids[:, :-1]))
        onehot = np.eye(7)[ids[0, 1:]][None]
        return ad.mul(ad.reduce_sum(ad.mul(logp, onehot)), -1.0)

    grads = ad.grad_of(loss, params)
    with ad.no_grad():
        err = ad.check_gradients(lambda: loss().item(), params, grads, coords_per_param=4,
                                 rng=np.random.default_rng(1))
    assert err < 1e-4


def test_gradient_check_still_catches_small_errors():
    # the roundoff allowance must not hide a 0.1% error in a real gradient
    m = LanguageModel(ModelConfig(7, n_layers=1, n_heads=2, d_model=4, context_len=6), seed=0)
    ids = np.array([[3, 4, 5, 6, 1]])
    w = m.params["h0.w1"]

    def loss():
        logp = ad.log_softmax(m.forward(ids[:, :-1]))
        return ad.mul(ad.reduce_sum(ad.mul(logp, np.eye(7)[ids[0, 1:]][None])), -1.0)

    (grad,) = ad.grad_of(loss, [w])
    i = np.unravel_index(np.abs(grad).argmax(), grad.shape)
    grad[i] *= 1.001
    with ad.no_grad():
        assert ad.check_gradients(lambda: loss().item(), [w], [grad]) > 5e-4


# ------------------------------------------------------------------ decoding


def table(rows: dict, default):
    return LogitTableModel(6, lambda prefix: rows.get(len(prefix), default))


def test_greedy_picks_lowest_id_on_ties_and_stops():
    m = table({1: [0, 0, 0, 5, 5, 0], 2: [0, 9, 0, 0, 0, 0]}, [0] * 6)
    out = greedy_decode(m, [2], stop_token=1, max_len=5)
    assert out.tokens == (3,) and not out.truncated


def test_greedy_truncates_at_max_len():
    m = table({}, [0, 0, 0, 0, 1, 0])
    out = greedy_decode(m, [2], stop_token=1, max_len=3)
    assert out.tokens == (4, 4, 4) and out.truncated


def test_decoding_never_emits_pad():
    m = table({}, [10, 0, 0, 0, 0, 0])
    assert 0 not in greedy_decode(m, [2], 1, 3).tokens


def test_batched_greedy_matches_single(model):
    prefixes = [[3], [4, 5, 6], [7, 8]]
    batched = greedy_decode_batch(model, prefixes, 1, 5)
    assert batched == [greedy_decode(model, p, 1, 5) for p in prefixes]


def test_top1_equals_greedy(model):
    rng = np.random.default_rng(0)
    assert top_k_sample(model, [3, 4], 1, rng, 1, 6) == greedy_decode(model, [3, 4], 1, 6)


@given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 5))
def test_top_k_only_samples_top_k_tokens(seed, k):
    logits = [0.0, -5.0, 4.0, 3.0, 2.0, 1.0]
    m = LogitTableModel(6, lambda prefix: logits)
    allowed = set(np.argsort(logits)[::-1][:k].tolist()) - {0}
    out = top_k_sample(m, [2], k, np.random.default_rng(seed), stop_token=99, max_len=4)
    assert set(out.tokens) <= allowed | {0} and 0 not in out.tokens


def test_top_k_frequencies_follow_renormalized_softmax():
    logits = np.array([-np.inf, 0.0, 1.0, 0.5, -3.0, -3.0])
    m = LogitTableModel(6, lambda prefix: logits)
    rng = np.random.default_rng(0)
    draws = top_k_sample_batch(m, [[2]] * 20000, 3, rng, stop_token=99, max_len=1)
    counts = np.bincount([d.tokens[0] for d in draws], minlength=6)
    p = np.exp(logits[[1, 2, 3]])
    p /= p.sum()
    assert np.allclose(counts[[1, 2, 3]] / 20000, p, atol=0.015)
    assert counts[4] == counts[5] == 0


def test_top_k_validates_k(model):
    with pytest.raises(ValueError):
        top_k_sample(model, [3], 0, np.random.default_rng(0), 1, 3)
    with pytest.raises(ValueError):
        top_k_sample(model, [3], V + 1, np.random.default_rng(0), 1, 3)


def test_temperature_validation_and_flattening():
    with pytest.raises(ValueError):
        log_probs_with_temperature([1.0, 2.0], 0.0)
    lp = log_probs_with_temperature([1.0, 2.0], 1e9)
    assert np.allclose(np.exp(lp), 0.5)


class _Uncached:
    """Same model seen only through ``logits_numpy``, forcing full recomputation."""

    def __init__(self, model):
        self.model = model
        self.vocab_size = model.vocab_size
        self.context_len = model.context_len

    def logits_numpy(self, ids):
        return self.model.logits_numpy(ids)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), lengths=st.lists(st.integers(1, 6), min_size=1, max_size=5))
def test_cached_decoding_matches_full_recompute(seed, lengths):
    m = LanguageModel(ModelConfig(V, n_layers=2, n_heads=2, d_model=16, context_len=12), seed=seed)
    for p in m.parameters():
        p.data *= 30  # sharp, varied predictions
    rng = np.random.default_rng(seed)
    prefixes = [list(rng.integers(1, V, size=n)) for n in lengths]
    assert greedy_decode_batch(m, prefixes, 1, 6) == greedy_decode_batch(_Uncached(m), prefixes, 1, 6)
    a = top_k_sample_batch(m, prefixes, 4, np.random.default_rng(seed), 1, 6)
    b = top_k_sample_batch(_Uncached(m), prefixes, 4, np.random.default_rng(seed), 1, 6)
    assert a == b
