"""Generator: causality, seeded sampling, scoring consistency, MLE training."""

import numpy as np
import pytest
import scipy.stats

from dialogail import autodiff as ad
from dialogail.errors import TrainingError
from dialogail.policy import (
    GeneratedResponse, PolicyConfig, TransformerPolicy,
    batch_scores, evaluate_cross_entropy, mle_pretrain, pack_batch,
    sample_response, sequence_log_prob,
)
from dialogail.textdata import BOS, EOS, SEP, encode
from conftest import make_policy


def test_config_validation():
    with pytest.raises(ValueError):
        PolicyConfig(vocab_size=10, embed_dim=10, n_heads=3)
    with pytest.raises(ValueError):
        PolicyConfig(vocab_size=10, max_context=8, max_response=8)
    with pytest.raises(ValueError):
        PolicyConfig(vocab_size=10, dropout=1.0)


def test_forward_shapes_and_finite():
    model = make_policy(11)
    logits = model.forward_logits(np.array([[BOS]]))
    assert logits.shape == (1, 1, 11)
    assert np.isfinite(logits).all()


def test_context_overflow_rejected():
    model = make_policy(11)
    with pytest.raises(ValueError):
        model.forward_logits(np.zeros((1, 49), dtype=np.int64))


def test_causality_bitwise():
    model = make_policy(13, seed=3)
    ids = np.array([[1, 5, 6, 7, 8]])
    base = model.forward_logits(ids)
    for swap in (9, 10, 11):
        changed = ids.copy()
        changed[0, -1] = swap
        out = model.forward_logits(changed)
        assert (out[0, :-1] == base[0, :-1]).all()


def test_zero_head_gives_uniform_softmax():
    model = make_policy(9)
    model.params["head_w"].data[:] = 0.0
    model.params["head_b"].data[:] = 0.0
    logits = model.forward_logits(np.array([[BOS, 5, 6]]))
    assert np.allclose(logits, 0.0)
    probs = ad.softmax(ad.Tensor(logits[0, -1])).data
    np.testing.assert_allclose(probs, np.full(9, 1 / 9), atol=1e-12)


def test_sampling_deterministic_in_z():
    model = make_policy(12, seed=1)
    state = np.array([BOS, 7, SEP, 8, SEP])
    a = sample_response(model, state, z=42, temperature=1.0)
    b = sample_response(model, state, z=42, temperature=1.0)
    assert (a.response_ids == b.response_ids).all()
    np.testing.assert_array_equal(a.log_probs, b.log_probs)
    c = sample_response(model, state, z=43, temperature=1.0)
    assert a.z != c.z


def test_sampling_invariants():
    model = make_policy(12, seed=2)
    state = np.array([BOS, SEP, 9, SEP])
    for z in range(20):
        resp = sample_response(model, state, z=z, temperature=1.0)
        assert 1 <= len(resp.response_ids) <= model.config.max_response
        assert (resp.log_probs <= 0).all() and np.isfinite(resp.log_probs).all()
        if EOS in resp.response_ids:
            assert resp.response_ids[-1] == EOS


def test_greedy_is_argmax_with_low_id_ties():
    model = make_policy(9)
    # zeroed head -> all logits equal -> greedy must pick token id 0
    model.params["head_w"].data[:] = 0.0
    model.params["head_b"].data[:] = 0.0
    resp = sample_response(model, np.array([BOS, SEP, 5, SEP]), z=0, temperature=0.0)
    assert resp.response_ids[0] == 0


def test_sampling_matches_hand_set_distribution():
    # head bias carries the target distribution; everything else zeroed
    target = np.array([0.7, 0.2, 0.1])
    model = make_policy(3, max_response=1)
    for name, t in model.params.items():
        t.data[:] = 0.0
    model.params["head_b"].data[:] = np.log(target)
    state = np.array([0])
    counts = np.zeros(3)
    for z in range(10000):
        resp = sample_response(model, state, z=z, temperature=1.0)
        counts[resp.response_ids[0]] += 1
    freqs = counts / counts.sum()
    assert np.abs(freqs - target).max() < 0.02


def test_sampling_frequencies_chi_square_against_forward():
    model = make_policy(8, seed=5)
    state = np.array([BOS, 6, SEP, 7, SEP])
    logits = model.forward_logits(state[None])[0, -1].astype(np.float64)
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    counts = np.zeros(8)
    n = 10000
    for z in range(n):
        resp = sample_response(model, state, z=z, temperature=1.0)
        counts[resp.response_ids[0]] += 1
    expected = probs * n
    keep = expected > 1e-9
    chi2, p = scipy.stats.chisquare(counts[keep], expected[keep])
    assert p > 0.001


def test_recorded_log_probs_match_rescoring():
    model = make_policy(12, seed=6, dtype=np.float32)
    state = np.array([BOS, 7, SEP, 8, SEP])
    for z in range(10):
        resp = sample_response(model, state, z=z, temperature=1.0)
        total, per_token = sequence_log_prob(model, state, resp.response_ids)
        assert per_token.shape == resp.log_probs.shape
        np.testing.assert_allclose(per_token, resp.log_probs, atol=1e-5)
        assert abs(total - resp.total_log_prob) < 1e-4


def test_sequence_log_prob_uniform_policy():
    model = make_policy(10)
    model.params["head_w"].data[:] = 0.0
    model.params["head_b"].data[:] = 0.0
    state = np.array([BOS, SEP, 5, SEP])
    response = np.array([6, 7, EOS])
    total, per_token = sequence_log_prob(model, state, response)
    np.testing.assert_allclose(per_token, -np.log(10.0), rtol=1e-6)
    assert abs(total - (-3 * np.log(10.0))) < 1e-6


def test_sequence_log_prob_totals_sum_of_parts():
    model = make_policy(12, seed=8)
    state = np.array([BOS, 5, SEP, 6, SEP])
    response = np.array([7, 8, 9, EOS])
    total, per_token = sequence_log_prob(model, state, response)
    assert abs(total - per_token.sum()) < 1e-6
    assert (np.exp(per_token) <= 1.0).all() and (np.exp(per_token) > 0.0).all()


def test_sequence_log_prob_rejects_bad_tokens():
    model = make_policy(10)
    with pytest.raises(ValueError):
        sequence_log_prob(model, np.array([BOS]), np.array([11]))
    with pytest.raises(ValueError):
        sequence_log_prob(model, np.array([BOS]), np.array([], dtype=np.int64))


def test_forced_certain_sequence_has_zero_log_prob():
    # one-token vocab after masking: make token 5 overwhelmingly likely
    model = make_policy(8)
    for name, t in model.params.items():
        t.data[:] = 0.0
    bias = np.full(8, -1e4)
    bias[5] = 1e4
    model.params["head_b"].data[:] = bias
    total, per_token = sequence_log_prob(model, np.array([BOS]), np.array([5, 5]))
    assert abs(total) < 1e-8


def test_policy_network_full_grad_check():
    model = make_policy(10, dtype=np.float64, seed=9)
    pairs = [
        (np.array([BOS, 5, SEP, 6, SEP]), np.array([7, EOS])),
        (np.array([BOS, SEP, 8, SEP]), np.array([9, 5, EOS])),
    ]
    inputs, labels, mask = pack_batch(pairs, 10)

    params = list(model.params.values())

    def loss_fn(*_):
        return ad.cross_entropy(model.forward(inputs), labels, mask)

    err = ad.grad_check(loss_fn, params, max_coords=6, rng=np.random.default_rng(0))
    assert err < 1e-4


def test_mle_zero_steps_identity():
    model = make_policy(10)
    before = model.clone_param_arrays()
    result = mle_pretrain(model, [], [], steps=0, batch_size=4, lr=1e-3, warmup_steps=0,
                          rng=np.random.default_rng(0))
    assert result.steps_run == 0
    for k, v in model.param_arrays().items():
        np.testing.assert_array_equal(v, before[k])


def test_mle_loss_decreases(tiny_corpus):
    _, trajs, vocab = tiny_corpus
    model = make_policy(len(vocab), dtype=np.float32, seed=10, max_context=64, max_response=12)
    pairs = [tuple(np.asarray(x) for x in encode(t, vocab, model.config.max_state_len, 12))
             for t in trajs[:30]]
    result = mle_pretrain(model, pairs, pairs[:8], steps=200, batch_size=8, lr=3e-3,
                          warmup_steps=10, rng=np.random.default_rng(1))
    assert result.steps_run == 200
    assert np.mean(result.train_losses[-10:]) < result.train_losses[0]


def test_mle_memorizes_single_trajectory(tiny_corpus):
    _, trajs, vocab = tiny_corpus
    model = make_policy(len(vocab), dtype=np.float32, seed=11, max_context=64, max_response=12)
    pair = tuple(np.asarray(x) for x in encode(trajs[0], vocab, model.config.max_state_len, 12))
    mle_pretrain(model, [pair], [pair], steps=300, batch_size=1, lr=1e-2,
                 warmup_steps=5, rng=np.random.default_rng(2))
    ce = evaluate_cross_entropy(model, [pair])
    assert ce < 0.1


def test_mle_divergence_aborts():
    model = make_policy(10)
    model.params["head_w"].data[:] = np.nan
    pair = (np.array([BOS, SEP, 5, SEP]), np.array([6, EOS]))
    with pytest.raises((TrainingError, ValueError)):
        mle_pretrain(model, [pair], [], steps=5, batch_size=1, lr=1e-3, warmup_steps=0,
                     rng=np.random.default_rng(0))


def test_batch_scores_match_single_scoring():
    model = make_policy(12, seed=12)
    pairs = [
        (np.array([BOS, 5, SEP, 6, SEP]), np.array([7, EOS])),
        (np.array([BOS, SEP, 8, SEP]), np.array([9, 5, 6, EOS])),
        (np.array([BOS, SEP, 9, SEP]), np.array([EOS])),
    ]
    with ad.no_grad():
        totals, entropy, _ = batch_scores(model, pairs)
    for i, (s, r) in enumerate(pairs):
        single, _ = sequence_log_prob(model, s, r)
        assert abs(float(totals.data[i]) - single) < 1e-4
    assert float(entropy.item()) > 0.0
