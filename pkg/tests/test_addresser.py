"""Unit tests for memory addressing: scoring, labels, top-L, training."""

import numpy as np
import pytest

from memtraj.addresser import (
    _cosine_backward,
    _cosine_forward,
    addresser_loss,
    decoded_intentions,
    fixed_cosine_nets,
    init_addresser_nets,
    key_table,
    pseudo_label,
    pseudo_labels,
    score,
    score_all,
    top_l,
    top_l_scored,
    train_addresser,
)
from memtraj.datasets import synth_generate
from memtraj.features import init_feature_nets, train_features
from memtraj.membank import bank_init

from conftest import quick_config


def cosine(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def make_bank(seed=1, n=12):
    scenes = synth_generate(seed, n)
    nets = init_feature_nets(seed, past_len=8, past_dim=32, intent_dim=16)
    return bank_init(nets, scenes), nets, scenes


def test_fixed_cosine_matches_manual():
    rng = np.random.default_rng(3)
    nets = fixed_cosine_nets(6)
    q = rng.normal(size=6)
    k = rng.normal(size=6)
    assert score(nets, q, k) == pytest.approx(cosine(q, k), abs=1e-12)


def test_init_starts_at_raw_cosine():
    nets = init_addresser_nets(past_dim=24, addr_dim=24)
    fixed = fixed_cosine_nets(24)
    rng = np.random.default_rng(6)
    for _ in range(10):
        q = rng.normal(size=24)
        k = rng.normal(size=24)
        assert score(nets, q, k) == score(fixed, q, k)
    # zero-padding projections preserve the raw cosine exactly as well
    wide = init_addresser_nets(past_dim=24, addr_dim=40)
    assert wide.query_proj.weights[0].shape == (40, 24)
    q = rng.normal(size=24)
    k = rng.normal(size=24)
    assert score(wide, q, k) == pytest.approx(score(fixed, q, k), abs=1e-12)
    with pytest.raises(ValueError):
        init_addresser_nets(past_dim=0)


def test_score_all_matches_pairwise(small_scenes):
    bank, _, _ = make_bank()
    nets = init_addresser_nets(past_dim=32, addr_dim=16)
    rng = np.random.default_rng(4)
    q = rng.normal(size=32)
    scores = score_all(nets, q, bank)
    assert scores.shape == (len(bank),)
    for i in range(len(bank)):
        assert scores[i] == pytest.approx(score(nets, q, bank.entries[i].past_feat), abs=1e-10)
    # cached keys give the same answer
    keys = key_table(nets, bank)
    np.testing.assert_allclose(score_all(nets, q, bank, keys=keys), scores, atol=0)


def test_degenerate_projections_score_zero(caplog):
    bank, _, _ = make_bank()
    nets = fixed_cosine_nets(32)
    scores = score_all(nets, np.zeros(32), bank)
    np.testing.assert_array_equal(scores, np.zeros(len(bank)))
    bank.entries[2].past_feat = np.zeros(32)
    bank.__dict__.pop("past_matrix", None)  # rebuild the cached matrix
    scores = score_all(nets, np.ones(32), bank)
    assert scores[2] == 0.0
    assert score(nets, np.zeros(32), np.ones(32)) == 0.0


def test_pseudo_label_hand_cases():
    assert pseudo_label(0.0, 2.0) == 1.0
    assert pseudo_label(1.0, 2.0) == 0.5
    assert pseudo_label(2.0, 2.0) == 0.0
    assert pseudo_label(5.0, 2.0) == 0.0
    with pytest.raises(ValueError):
        pseudo_label(1.0, 0.0)
    np.testing.assert_allclose(
        pseudo_labels(np.array([0.0, 1.0, 2.0, 5.0]), 2.0), [1.0, 0.5, 0.0, 0.0], atol=0
    )


def test_addresser_loss_hand_case():
    assert addresser_loss([1.0, 0.0], [0.0, 0.0]) == 1.0
    assert addresser_loss([0.5, 0.25], [0.5, 0.25]) == 0.0
    with pytest.raises(ValueError):
        addresser_loss([1.0], [1.0, 2.0])


def test_top_l_orders_and_breaks_ties_low_address():
    bank, _, _ = make_bank(n=8)
    # duplicate past features produce exactly tied scores
    bank.entries[5].past_feat = bank.entries[1].past_feat.copy()
    bank.__dict__.pop("past_matrix", None)
    nets = fixed_cosine_nets(32)
    q = bank.entries[1].past_feat
    addrs, scores = top_l_scored(nets, q, bank, count=8)
    assert addrs[0] == 1 and addrs[1] == 5  # tie at score 1.0, lower address first
    assert scores[0] == scores[1] == pytest.approx(1.0, abs=1e-12)
    assert all(scores[i] >= scores[i + 1] for i in range(7))
    with pytest.raises(ValueError):
        top_l(nets, q, bank, count=0)
    with pytest.raises(ValueError):
        top_l(nets, q, bank, count=9)


def test_cosine_backward_matches_finite_difference():
    rng = np.random.default_rng(11)
    u = rng.normal(size=(3, 5))
    w = rng.normal(size=(4, 5))
    labels = rng.uniform(size=(3, 4))

    def loss(u_, w_):
        state = _cosine_forward(u_, w_)
        return float(np.sum((state.scores - labels) ** 2))

    state = _cosine_forward(u, w)
    d_scores = 2.0 * (state.scores - labels)
    d_u, d_w = _cosine_backward(state, d_scores)
    eps = 1e-6
    worst = 0.0
    for arr, grad in ((u, d_u), (w, d_w)):
        flat, gflat = arr.ravel(), grad.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = loss(u, w)
            flat[j] = orig - eps
            f_minus = loss(u, w)
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            worst = max(worst, abs(numeric - gflat[j]) / max(1e-8, abs(numeric) + abs(gflat[j])))
    assert worst < 1e-4


def test_cosine_backward_zeroes_degenerate_rows():
    u = np.vstack([np.zeros(4), np.ones(4)])
    w = np.vstack([np.ones(4), np.zeros(4)])
    state = _cosine_forward(u, w)
    assert state.scores[0, 0] == 0.0 and state.scores[1, 1] == 0.0
    d_u, d_w = _cosine_backward(state, np.ones((2, 2)))
    np.testing.assert_array_equal(d_u[0], np.zeros(4))
    np.testing.assert_array_equal(d_w[1], np.zeros(4))
    assert np.all(np.isfinite(d_u)) and np.all(np.isfinite(d_w))


def test_decoded_intentions_shape():
    bank, nets, _ = make_bank()
    decoded = decoded_intentions(nets, bank)
    assert decoded.shape == (len(bank), 2)


def test_train_addresser_reduces_label_loss():
    config = quick_config(epochs_features=60, epochs_addresser=40, lr_addresser=1e-3, seed=6)
    scenes = synth_generate(19, 24)
    feature_nets = train_features(scenes, config)
    bank = bank_init(feature_nets, scenes)
    init = init_addresser_nets(past_dim=32, addr_dim=32)
    trained = train_addresser(init, bank, feature_nets, scenes, config)

    decoded = decoded_intentions(feature_nets, bank)
    threshold = config.label_threshold_value()

    def total_loss(nets):
        total = 0.0
        for i, entry in enumerate(bank.entries):
            labels = pseudo_labels(np.linalg.norm(decoded - entry.destination, axis=1), threshold)
            total += addresser_loss(score_all(nets, entry.past_feat, bank), labels)
        return total

    assert total_loss(trained) < total_loss(init)
    # the input nets were not touched
    fresh = init_addresser_nets(past_dim=32, addr_dim=32)
    np.testing.assert_array_equal(init.query_proj.weights[0], fresh.query_proj.weights[0])


def test_train_addresser_deterministic():
    config = quick_config(epochs_addresser=5, seed=2)
    scenes = synth_generate(23, 10)
    feature_nets = init_feature_nets(1, past_len=8, past_dim=32, intent_dim=16)
    bank = bank_init(feature_nets, scenes)
    init = init_addresser_nets(past_dim=32, addr_dim=32)
    a = train_addresser(init, bank, feature_nets, scenes, config)
    b = train_addresser(init, bank, feature_nets, scenes, config)
    np.testing.assert_array_equal(a.query_proj.weights[0], b.query_proj.weights[0])
    np.testing.assert_array_equal(a.key_proj.weights[0], b.key_proj.weights[0])
    np.testing.assert_array_equal(a.key_proj.biases[0], b.key_proj.biases[0])


def test_train_addresser_validation():
    config = quick_config()
    scenes = synth_generate(1, 4)
    feature_nets = init_feature_nets(1, past_len=8, past_dim=32, intent_dim=16)
    bank = bank_init(feature_nets, scenes)
    nets = init_addresser_nets(past_dim=32)
    with pytest.raises(ValueError, match="empty"):
        train_addresser(nets, bank, feature_nets, [], config)
