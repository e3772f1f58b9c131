"""PPO: advantages, clip arithmetic, KL estimator, bandit convergence."""

import numpy as np
import pytest

from dialogail import autodiff as ad
from dialogail.optim import AdamW, WarmupLinearSchedule
from dialogail.policy import sample_response, sequence_log_prob
from dialogail.ppo import (
    BufferEntry, PPOConfig, RolloutBuffer,
    compute_advantages, ppo_objective, ppo_update,
)
from dialogail.textdata import BOS, EOS, SEP
from conftest import make_policy


def entry(state, response, old_lp, reward=0.0, advantage=None):
    e = BufferEntry(
        state_ids=np.asarray(state, dtype=np.int64),
        response_ids=np.asarray(response, dtype=np.int64),
        old_log_prob=float(old_lp),
        reward=float(reward),
    )
    if advantage is not None:
        e.advantage = float(advantage)
    return e


def test_config_validation():
    with pytest.raises(ValueError):
        PPOConfig(buffer_size=10, minibatch_size=3)
    with pytest.raises(ValueError):
        PPOConfig(clip_epsilon=0.0)
    with pytest.raises(ValueError):
        PPOConfig(baseline_momentum=1.0)


def fill_buffer(rewards, baseline=0.0, momentum=0.9):
    buf = RolloutBuffer(capacity=len(rewards))
    for r in rewards:
        buf.add(entry([BOS], [EOS], -1.0, reward=r))
    new_baseline = compute_advantages(buf, baseline, momentum)
    return buf, new_baseline


def test_equal_rewards_zero_advantages():
    buf, _ = fill_buffer([0.7] * 8)
    assert all(e.advantage == 0.0 for e in buf.entries)


def test_two_point_advantage_normalization():
    buf, _ = fill_buffer([0.0, 1.0], baseline=0.5)
    np.testing.assert_allclose([e.advantage for e in buf.entries], [-1.0, 1.0], rtol=1e-12)


def test_normalized_advantages_standardized():
    rng = np.random.default_rng(0)
    buf, _ = fill_buffer(list(rng.random(32)))
    adv = np.array([e.advantage for e in buf.entries])
    assert abs(adv.mean()) < 1e-6
    assert abs(adv.std() - 1.0) < 1e-6


def test_baseline_ema_fixed_point():
    baseline = 0.0
    for _ in range(300):
        _, baseline = fill_buffer([2.5] * 4, baseline=baseline, momentum=0.9)
    assert abs(baseline - 2.5) < 1e-10


def test_empty_buffer_rejected():
    buf = RolloutBuffer(capacity=4)
    with pytest.raises(ValueError):
        compute_advantages(buf, 0.0, 0.9)


def test_clip_arithmetic_hand_values():
    # contribution of a single entry: min(rho*adv, clip(rho)*adv)
    cfg = PPOConfig()
    model = make_policy(10)
    state = np.array([BOS, SEP, 5, SEP])
    response = np.array([6, EOS])
    new_lp, _ = sequence_log_prob(model, state, response)

    for rho, adv, expected in ((1.5, 1.0, 1.2), (0.5, -1.0, -0.8)):
        old_lp = new_lp - np.log(rho)  # makes exp(new - old) == rho
        e = entry(state, response, old_lp, advantage=adv)
        objective, stats = ppo_objective(model, [e], cfg)
        assert objective.item() == pytest.approx(expected, rel=1e-5)
        assert stats.clip_fraction == 1.0


def test_identity_policy_gives_unit_ratio_zero_kl():
    cfg = PPOConfig(entropy_coef=0.0)
    model = make_policy(10, seed=4)
    state = np.array([BOS, SEP, 5, SEP])
    response = np.array([7, 6, EOS])
    new_lp, _ = sequence_log_prob(model, state, response)
    e = entry(state, response, new_lp, advantage=0.7)
    objective, stats = ppo_objective(model, [e], cfg)
    assert stats.mean_ratio == pytest.approx(1.0, abs=1e-6)
    assert stats.approx_kl == pytest.approx(0.0, abs=1e-9)
    assert objective.item() == pytest.approx(0.7, rel=1e-5)


def test_objective_includes_entropy_term():
    cfg = PPOConfig(entropy_coef=0.5)
    model = make_policy(10, seed=4)
    state = np.array([BOS, SEP, 5, SEP])
    response = np.array([7, EOS])
    new_lp, _ = sequence_log_prob(model, state, response)
    e = entry(state, response, new_lp, advantage=0.0)
    objective, stats = ppo_objective(model, [e], cfg)
    assert objective.item() == pytest.approx(0.5 * stats.entropy, rel=1e-5)
    assert stats.entropy > 0.0


def test_kl_estimator_non_negative():
    cfg = PPOConfig(kl_coef=1.0)
    model = make_policy(10, seed=5)
    state = np.array([BOS, SEP, 5, SEP])
    response = np.array([6, EOS])
    new_lp, _ = sequence_log_prob(model, state, response)
    # old more confident than new -> positive estimate; less confident -> clipped at 0
    for shift in (0.5, -0.5):
        e = entry(state, response, new_lp + shift, advantage=0.0)
        _, stats = ppo_objective(model, [e], cfg)
        assert stats.approx_kl == pytest.approx(max(shift, 0.0), abs=1e-6)


def test_non_finite_ratio_aborts():
    from dialogail.errors import TrainingError

    cfg = PPOConfig()
    model = make_policy(10)
    e = entry([BOS, SEP, 5, SEP], [6, EOS], -5000.0, advantage=1.0)
    e.old_log_prob = -np.inf
    with pytest.raises(TrainingError):
        ppo_objective(model, [e], cfg)


def make_filled_buffer(model, cfg, n, rng):
    buf = RolloutBuffer(capacity=n)
    state = np.array([BOS, SEP, 5, SEP])
    for _ in range(n):
        z = int(rng.integers(2**32))
        resp = sample_response(model, state, z=z, temperature=1.0)
        total, _ = sequence_log_prob(model, state, resp.response_ids)
        buf.add(entry(state, resp.response_ids, total, reward=float(rng.random())))
    compute_advantages(buf, 0.0, cfg.baseline_momentum)
    return buf


def test_zero_lr_update_leaves_params_and_reports_stats():
    cfg = PPOConfig(buffer_size=8, minibatch_size=4, update_epochs=2)
    model = make_policy(10, seed=6, dtype=np.float32)
    opt = AdamW(model.params, lr=0.0)
    buf = make_filled_buffer(model, cfg, 8, np.random.default_rng(0))
    before = model.clone_param_arrays()
    stats = ppo_update(model, opt, None, buf, cfg, np.random.default_rng(1), lr=0.0)
    for k, arr in model.param_arrays().items():
        np.testing.assert_array_equal(arr, before[k])
    assert 0.0 <= stats.clip_fraction <= 1.0
    assert np.isfinite(stats.objective)


def test_zero_advantage_zero_coef_gives_zero_gradient():
    cfg = PPOConfig(kl_coef=0.0, entropy_coef=0.0)
    model = make_policy(10, seed=7, dtype=np.float64)
    state = np.array([BOS, SEP, 5, SEP])
    response = np.array([6, EOS])
    new_lp, _ = sequence_log_prob(model, state, response)
    e = entry(state, response, new_lp, advantage=0.0)
    objective, _ = ppo_objective(model, [e], cfg)
    loss = ad.mul(objective, -1.0)
    for t in model.params.values():
        t.zero_grad()
    loss.backward()
    norms = [np.abs(t.grad).max() for t in model.params.values() if t.grad is not None]
    assert max(norms, default=0.0) < 1e-8


def test_update_deterministic_for_fixed_seed():
    cfg = PPOConfig(buffer_size=8, minibatch_size=4, update_epochs=2)

    def run():
        model = make_policy(10, seed=8, dtype=np.float32)
        opt = AdamW(model.params, lr=1e-3)
        buf = make_filled_buffer(model, cfg, 8, np.random.default_rng(3))
        schedule = WarmupLinearSchedule(1e-3, 2, 100)
        ppo_update(model, opt, schedule, buf, cfg, np.random.default_rng(4))
        return model.clone_param_arrays()

    a, b = run(), run()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


def test_positive_advantage_increases_log_prob():
    cfg = PPOConfig(buffer_size=1, minibatch_size=1, update_epochs=1)
    model = make_policy(10, seed=9, dtype=np.float64)
    state = np.array([BOS, SEP, 5, SEP])
    response = np.array([6, 7, EOS])
    before, _ = sequence_log_prob(model, state, response)
    buf = RolloutBuffer(capacity=1)
    buf.add(entry(state, response, before, advantage=1.0))
    opt = AdamW(model.params, lr=1e-4)
    ppo_update(model, opt, None, buf, cfg, np.random.default_rng(0), lr=1e-4)
    after, _ = sequence_log_prob(model, state, response)
    assert after > before


def test_clipping_inactive_when_ratios_inside_band():
    cfg = PPOConfig()
    model = make_policy(10, seed=10)
    state = np.array([BOS, SEP, 5, SEP])
    entries = []
    rng = np.random.default_rng(5)
    for resp in ([6, EOS], [7, EOS], [8, 9, EOS]):
        response = np.array(resp)
        lp, _ = sequence_log_prob(model, state, response)
        rho = 1.0 + rng.uniform(-0.15, 0.15)
        entries.append(entry(state, response, lp - np.log(rho), advantage=rng.normal()))
    objective, stats = ppo_objective(model, entries, cfg)
    assert stats.clip_fraction == 0.0
    # unclipped importance-weighted objective must match exactly
    expected = np.mean([
        np.exp(sequence_log_prob(model, e.state_ids, e.response_ids)[0] - e.old_log_prob) * e.advantage
        for e in entries
    ])
    assert objective.item() == pytest.approx(expected, rel=1e-6)


def two_armed_bandit_probability(n_buffers=60, seed=0):
    """Train a one-token policy where arm token 5 pays 1 and the rest pay 0."""
    cfg = PPOConfig(buffer_size=32, minibatch_size=8, update_epochs=4)
    model = make_policy(7, seed=seed, dtype=np.float32, max_response=1, max_context=8)
    opt = AdamW(model.params, lr=3e-3)
    rng = np.random.default_rng(seed + 1)
    state = np.array([BOS, SEP])
    baseline = 0.0
    for _ in range(n_buffers):
        buf = RolloutBuffer(capacity=cfg.buffer_size)
        for _ in range(cfg.buffer_size):
            z = int(rng.integers(2**32))
            resp = sample_response(model, state, z=z, temperature=1.0)
            reward = 1.0 if resp.response_ids[0] == 5 else 0.0
            buf.add(entry(state, resp.response_ids, resp.total_log_prob, reward=reward))
        baseline = compute_advantages(buf, baseline, cfg.baseline_momentum)
        ppo_update(model, opt, None, buf, cfg, rng, lr=3e-3)
    logits = model.forward_logits(state[None])[0, -1].astype(np.float64)
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    return probs[5]


def test_bandit_converges_to_rewarded_arm():
    assert two_armed_bandit_probability() > 0.95
