import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from entlib import autodiff as ad
from entlib.autodiff import ConfigError, Tensor
from entlib.corpus import Batch, DataError, build_vocab, chunk_and_batch, parse_corpus_text, scene_chunks
from entlib.gradcheck import TINY_CORPUS, gradcheck_model, tiny_config
from entlib.model import (ModelConfig, bilstm_forward, embed_input, expected_param_count,
                          forward_batch, forward_chunk, guard_entity_rows, init_params, predict,
                          score_mention)


@pytest.fixture
def tiny():
    corpus = parse_corpus_text(TINY_CORPUS)
    return corpus, build_vocab(corpus)


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


# ---------------------------------------------------------------- configuration and init

def test_variant_names_are_case_insensitive():
    assert ModelConfig(variant="noentlib").variant == "NoEntLib"
    assert ModelConfig(variant="ENTLIB").entlib
    with pytest.raises(ConfigError):
        ModelConfig(variant="other")
    with pytest.raises(ConfigError):
        ModelConfig(dropout_input=1.0)
    with pytest.raises(ConfigError):
        ModelConfig(activation="sigmoid")


def test_default_input_width():
    assert ModelConfig().input_dim == 434


def test_init_is_deterministic(tiny):
    _, vocab = tiny
    a = init_params(tiny_config(seed=3), vocab).arrays()
    b = init_params(tiny_config(seed=3), vocab).arrays()
    c = init_params(tiny_config(seed=4), vocab).arrays()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["W_o"], c["W_o"])


def test_init_copies_pretrained(tiny):
    _, vocab = tiny
    pre = np.arange(len(vocab.tokens) * 4, dtype=float).reshape(-1, 4)
    params = init_params(tiny_config(), vocab, pretrained=pre)
    np.testing.assert_array_equal(params["W_t"].data, pre)
    params["W_t"].data[0, 0] = -1.0
    assert pre[0, 0] == 0.0
    with pytest.raises(ConfigError):
        init_params(tiny_config(), vocab, pretrained=pre[:, :3])


def test_init_bias_layout(tiny):
    _, vocab = tiny
    p = init_params(tiny_config(), vocab)
    d = 5
    np.testing.assert_array_equal(p["fwd.b"].data, np.r_[np.zeros(d), np.ones(d), np.zeros(2 * d)])
    np.testing.assert_array_equal(p["b"].data, 0.0)


def test_entity_rows_nonzero_over_many_seeds(tiny):
    _, vocab = tiny
    cfg = tiny_config()
    for seed in range(1000):
        E = init_params(cfg, vocab, seed=seed)["E"].data
        assert np.all(np.linalg.norm(E, axis=1) > 0)


def test_guard_restores_zeroed_rows(tiny):
    _, vocab = tiny
    p = init_params(tiny_config(), vocab)
    before = p["E"].data.copy()
    p["E"].data[1] = 0.0
    assert guard_entity_rows(p, before) == 1
    np.testing.assert_array_equal(p["E"].data, before)
    assert guard_entity_rows(init_params(tiny_config("NoEntLib"), vocab), before) == 0


@pytest.mark.parametrize("variant", ["EntLib", "NoEntLib"])
def test_parameter_count_formula(tiny, variant):
    _, vocab = tiny
    cfg = tiny_config(variant)
    p = init_params(cfg, vocab)
    V, S, N, D, k, d = len(vocab.tokens), len(vocab.speakers), 3, 4, 3, 5
    lstm_one = (D + k) * 4 * d + d * 4 * d + 4 * d
    head = (2 * d * k + k + N * k) if variant == "EntLib" else (2 * d * N + N)
    assert p.count() == V * D + S * k + 2 * lstm_one + head
    assert p.count() == expected_param_count(cfg, vocab)


# ---------------------------------------------------------------- input embedding

def _config_with_zero_dropout(**kw):
    base = dict(token_dim=4, entity_dim=3, lstm_dim=5, dropout_input=0.0, dropout_hidden=0.0)
    base.update(kw)
    return ModelConfig(**base)


def test_zero_embeddings_give_zero_input(tiny):
    _, vocab = tiny
    cfg = _config_with_zero_dropout()
    p = init_params(cfg, vocab)
    p["W_t"].data[:] = 0.0
    p["W_s"].data[:] = 0.0
    x = embed_input([1, 2], [[1], [1, 2]], p, cfg)
    np.testing.assert_array_equal(x.data, 0.0)


def test_two_speakers_are_summed(tiny):
    _, vocab = tiny
    cfg = _config_with_zero_dropout()
    p = init_params(cfg, vocab)
    y = embed_input([1], [[1, 2]], p, cfg).data[0]
    expected = np.concatenate([p["W_t"].data[1], p["W_s"].data[1] + p["W_s"].data[2]])
    np.testing.assert_allclose(y, np.tanh(expected), rtol=0, atol=1e-15)
    linear = _config_with_zero_dropout(activation="linear")
    np.testing.assert_array_equal(embed_input([1], [[1, 2]], p, linear).data[0], expected)


def test_empty_speaker_set_rejected(tiny):
    _, vocab = tiny
    cfg = _config_with_zero_dropout()
    with pytest.raises(DataError):
        embed_input([1], [[]], init_params(cfg, vocab), cfg)


# ---------------------------------------------------------------- BiLSTM

def _scalar_lstm_params(vocab):
    cfg = ModelConfig(token_dim=1, entity_dim=1, lstm_dim=1, dropout_input=0.0, dropout_hidden=0.0)
    p = init_params(cfg, vocab)
    for direction in ("fwd", "bwd"):
        p[f"{direction}.W_ih"].data[:] = 0.0
        p[f"{direction}.W_hh"].data[:] = 0.0
        p[f"{direction}.b"].data[:] = 1.0
    return cfg, p


def test_three_step_hand_recurrence(tiny):
    _, vocab = tiny
    cfg, p = _scalar_lstm_params(vocab)
    H = bilstm_forward(Tensor(np.random.default_rng(0).normal(size=(3, 2))), None, p, cfg).data
    s, g = sigmoid(1.0), math.tanh(1.0)
    c, expect = 0.0, []
    for _ in range(3):
        c = s * c + s * g
        expect.append(s * math.tanh(c))
    np.testing.assert_allclose(H[:, 0], expect, rtol=0, atol=1e-14)
    np.testing.assert_allclose(H[:, 1], expect[::-1], rtol=0, atol=1e-14)


def test_length_one_base_case(tiny):
    _, vocab = tiny
    cfg = _config_with_zero_dropout()
    p = init_params(cfg, vocab)
    x = np.random.default_rng(1).normal(size=(1, 7))
    H = bilstm_forward(Tensor(x), None, p, cfg).data
    d = 5
    for i, direction in enumerate(("fwd", "bwd")):
        z = x[0] @ p[f"{direction}.W_ih"].data + p[f"{direction}.b"].data
        sg = 1 / (1 + np.exp(-z))
        c = sg[:d] * np.tanh(z[2 * d:3 * d])
        np.testing.assert_allclose(H[0, i * d:(i + 1) * d], sg[3 * d:] * np.tanh(c), atol=1e-14)


def test_reversed_input_swaps_directions(tiny):
    _, vocab = tiny
    cfg = _config_with_zero_dropout()
    p = init_params(cfg, vocab)
    for k in ("W_ih", "W_hh", "b"):
        p[f"bwd.{k}"].data[:] = p[f"fwd.{k}"].data
    x = np.random.default_rng(2).normal(size=(6, 7))
    H = bilstm_forward(Tensor(x), None, p, cfg).data
    R = bilstm_forward(Tensor(x[::-1].copy()), None, p, cfg).data
    np.testing.assert_allclose(H[:, :5], R[::-1, 5:], atol=1e-13)
    np.testing.assert_allclose(H[:, 5:], R[::-1, :5], atol=1e-13)


# ---------------------------------------------------------------- output head

def test_softmax_of_known_logits():
    np.testing.assert_allclose(ad.softmax(Tensor(np.array([1.0, 0.0, -1.0]))).data,
                               [0.6652, 0.2447, 0.0900], atol=1e-4)


def test_retrieval_picks_aligned_entity(tiny):
    _, vocab = tiny
    cfg = _config_with_zero_dropout()
    p = init_params(cfg, vocab)
    p["W_o"].data[:] = 0.0
    p["b"].data[:] = p["E"].data[2]
    o = score_mention(np.ones(10), p, cfg)
    assert predict(o) == 2
    cos = p["E"].data @ p["E"].data[2] / (np.linalg.norm(p["E"].data, axis=1) * np.linalg.norm(p["E"].data[2]))
    np.testing.assert_allclose(o.data, np.exp(cos) / np.exp(cos).sum(), atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 2))
def test_entity_row_scale_invariance(scale, row):
    corpus = parse_corpus_text(TINY_CORPUS)
    vocab = build_vocab(corpus)
    cfg = _config_with_zero_dropout()
    p = init_params(cfg, vocab)
    h = np.random.default_rng(row).normal(size=(4, 10))
    before = score_mention(h, p, cfg).data
    p["E"].data[row] *= scale
    np.testing.assert_allclose(score_mention(h, p, cfg).data, before, rtol=0, atol=1e-12)


def test_baseline_is_not_scale_invariant(tiny):
    _, vocab = tiny
    cfg = _config_with_zero_dropout(variant="NoEntLib")
    p = init_params(cfg, vocab)
    h = np.random.default_rng(0).normal(size=(4, 10))
    before = score_mention(h, p, cfg).data
    p["W_o"].data[:, 1] *= 3.0
    assert np.max(np.abs(score_mention(h, p, cfg).data - before)) > 1e-6


def test_predict_ties_go_to_lowest_index():
    assert predict(np.array([0.25, 0.5, 0.5, 0.25])) == 1
    assert predict(np.array([[0.5, 0.5], [0.1, 0.9]])).tolist() == [0, 1]


# ---------------------------------------------------------------- chunk forward

def test_zero_mention_chunk(tiny):
    _, vocab = tiny
    corpus = parse_corpus_text("#scene z\n#speakers Ann\nhello\t-\n\n")
    (chunk,) = scene_chunks(corpus.scenes[0], vocab, 757)
    assert forward_chunk(chunk, init_params(tiny_config(), vocab)) == []


def test_identical_chunks_identical_outputs(tiny):
    corpus, vocab = tiny
    p = init_params(tiny_config(), vocab)
    (chunk, *_) = scene_chunks(corpus.scenes[0], vocab, 757)
    out = forward_batch(Batch.from_chunks([chunk, chunk]), p)
    m = len(chunk.mention_positions)
    np.testing.assert_array_equal(out.probs.data[:m], out.probs.data[m:])
    for (pa, da, ya), (pb, db, yb) in zip(forward_chunk(chunk, p), forward_chunk(chunk, p)):
        assert pa == pb and ya == yb and np.array_equal(da, db)


@pytest.mark.parametrize("variant", ["EntLib", "NoEntLib"])
def test_padding_equivalence(tiny, variant):
    corpus, vocab = tiny
    p = init_params(tiny_config(variant), vocab)
    chunks = [scene_chunks(s, vocab, 757)[0] for s in corpus.scenes]
    short = min(chunks, key=len)
    alone = forward_chunk(short, p)
    together = forward_batch(Batch.from_chunks(chunks), p)
    assert together.probs.shape[0] > len(alone)
    for pos, dist, pred in alone:
        j = together.mention_ids.index(f"{short.scene_id}:{short.offset + pos}")
        np.testing.assert_allclose(together.probs.data[j], dist, rtol=0, atol=1e-12)
        assert together.predictions[j] == pred


def test_distributions_are_normalized(tiny):
    corpus, vocab = tiny
    p = init_params(tiny_config(), vocab)
    (batch,) = chunk_and_batch(corpus, vocab)
    probs = forward_batch(batch, p, training=True, rng=np.random.default_rng(0)).probs.data
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    assert probs.shape == (batch.n_mentions, 3)


# ---------------------------------------------------------------- gradients

@pytest.mark.parametrize("variant", ["EntLib", "NoEntLib"])
def test_full_model_gradcheck(variant):
    report = gradcheck_model(variant)
    assert report.passed, report.errors
    assert set(report.errors) >= {"W_t", "W_s", "fwd.W_ih", "bwd.W_hh", "W_o", "b"}


def test_gradcheck_catches_corrupted_gradient():
    report = gradcheck_model("EntLib", corrupt="W_o")
    assert not report.passed
    assert report.failures() == ["W_o"]
