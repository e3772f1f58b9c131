"""Discriminator objective, reward signal, and the convex regularizer g."""

import numpy as np
import pytest

from dialogail import autodiff as ad
from dialogail.discriminator import (
    D_CLAMP, DiscConfig, Discriminator,
    disc_loss, disc_update, g_regularizer, reward_batch, reward_signal,
)
from dialogail.optim import AdamW
from dialogail.textdata import BOS, EOS, SEP

TWO_LN2 = 2 * np.log(2.0)


def make_disc(vocab_size=16, dtype=np.float64, seed=0, **overrides):
    defaults = dict(embed_dim=8, hidden_dim=16, max_state_len=24, max_response_len=8)
    defaults.update(overrides)
    return Discriminator(DiscConfig(vocab_size=vocab_size, **defaults), np.random.default_rng(seed), dtype=dtype)


def pair(state, response):
    return (np.asarray(state, dtype=np.int64), np.asarray(response, dtype=np.int64))


def some_pairs(rng, n, vocab_size=16, tok_lo=5):
    out = []
    for _ in range(n):
        s = [BOS] + list(rng.integers(tok_lo, vocab_size, size=3)) + [SEP]
        r = list(rng.integers(tok_lo, vocab_size, size=int(rng.integers(1, 5)))) + [EOS]
        out.append(pair(s, r))
    return out


def test_zeroed_output_head_scores_half():
    disc = make_disc()
    disc.params["w3"].data[:] = 0.0
    disc.params["b3"].data[:] = 0.0
    rng = np.random.default_rng(0)
    for s, r in some_pairs(rng, 5):
        assert disc.score(s, r) == pytest.approx(0.5, abs=1e-12)


def test_score_deterministic_and_clamped():
    disc = make_disc(seed=1)
    p = pair([BOS, 6, SEP], [7, EOS])
    assert disc.score(*p) == disc.score(*p)
    disc.params["b3"].data[:] = 1e4  # saturate the sigmoid
    assert disc.score(*p) == pytest.approx(1.0 - D_CLAMP)
    disc.params["b3"].data[:] = -1e4
    assert disc.score(*p) == pytest.approx(D_CLAMP)


def test_score_rejects_unencodable_pair():
    disc = make_disc()
    with pytest.raises(ValueError):
        disc.score(np.array([BOS, 99]), np.array([5]))
    with pytest.raises(ValueError):
        disc.score(np.array([], dtype=np.int64), np.array([5]))


def test_disc_loss_at_half_is_minus_two_ln_two():
    disc = make_disc()
    disc.params["w3"].data[:] = 0.0
    disc.params["b3"].data[:] = 0.0
    rng = np.random.default_rng(2)
    value = disc_loss(disc, some_pairs(rng, 6), some_pairs(rng, 6)).item()
    assert abs(value - (-TWO_LN2)) < 1e-9


def test_disc_loss_always_nonpositive():
    rng = np.random.default_rng(3)
    for seed in range(5):
        disc = make_disc(seed=seed)
        value = disc_loss(disc, some_pairs(rng, 4), some_pairs(rng, 4)).item()
        assert value <= 0.0


def test_disc_loss_optimum_at_clamp():
    # perfect discrimination: value -> 2*log(1 - 1e-6), just below zero
    optimum = 2 * np.log1p(-D_CLAMP)
    assert -1e-5 < optimum < 0.0


def test_disc_loss_empty_batch_rejected():
    disc = make_disc()
    with pytest.raises(ValueError):
        disc_loss(disc, [], some_pairs(np.random.default_rng(0), 2))


def test_identical_sets_cannot_beat_minus_two_ln_two():
    # exhaustive tabular D over the finite pair set: per-pair independent
    # maximization of a*log d + b*log(1-d) on a fine grid
    rng = np.random.default_rng(4)
    pairs = some_pairs(rng, 5)
    grid = np.linspace(D_CLAMP, 1.0 - D_CLAMP, 100001)
    total = 0.0
    for _ in pairs:  # identical generated and expert multiplicity: a = b = 1/n
        a = b = 1.0 / len(pairs)
        contrib = a * np.log(grid) + b * np.log(1.0 - grid)
        total += contrib.max()
    assert total <= -TWO_LN2 + 1e-6


def test_reward_signal_values():
    disc = make_disc()
    disc.params["w3"].data[:] = 0.0
    disc.params["b3"].data[:] = 0.0
    p = pair([BOS, 6, SEP], [7, EOS])
    assert reward_signal(disc, *p) == pytest.approx(np.log(2.0), abs=1e-9)
    disc.params["b3"].data[:] = 1e4
    assert reward_signal(disc, *p) == pytest.approx(-np.log1p(-D_CLAMP), rel=1e-6)
    disc.params["b3"].data[:] = -1e4
    assert reward_signal(disc, *p) == pytest.approx(-np.log(D_CLAMP), rel=1e-9)
    assert reward_signal(disc, *p) == pytest.approx(13.815510557964274, rel=1e-9)


def test_reward_strictly_decreasing_in_d():
    ds = np.linspace(D_CLAMP, 1 - D_CLAMP, 1000)
    rewards = -np.log(ds)
    assert (np.diff(rewards) < 0).all()


def test_reward_batch_matches_scalar():
    disc = make_disc(seed=5)
    rng = np.random.default_rng(5)
    pairs = some_pairs(rng, 6)
    batch = reward_batch(disc, pairs)
    singles = [reward_signal(disc, s, r) for s, r in pairs]
    np.testing.assert_allclose(batch, singles, rtol=1e-6)


# -- regularizer ---------------------------------------------------------------

def test_g_at_minus_ln2():
    assert g_regularizer(-np.log(2.0)) == pytest.approx(TWO_LN2, abs=1e-12)


def test_g_positive_branch_is_infinite():
    assert g_regularizer(0.5) == np.inf
    assert g_regularizer(0.0) == np.inf


def test_g_minimum_location_by_grid():
    xs = np.linspace(-10.0, -1e-4, 100001)
    vals = g_regularizer(xs)
    argmin = xs[np.argmin(vals)]
    assert abs(argmin - (-np.log(2.0))) < 1e-4
    assert vals.min() >= TWO_LN2 - 1e-9


def test_g_derivative_sign_change_at_minus_ln2():
    # g'(x) = (2 e^x - 1) / (1 - e^x): negative below -ln 2, positive above
    h = 1e-6
    x0 = -np.log(2.0)
    left = (g_regularizer(x0 - h) - g_regularizer(x0 - 3 * h)) / (2 * h)
    right = (g_regularizer(x0 + 3 * h) - g_regularizer(x0 + h)) / (2 * h)
    assert left < 0 < right


def test_g_grows_toward_both_limits():
    assert g_regularizer(-10.0) > g_regularizer(-2.0 - np.log(2.0)) > TWO_LN2
    assert g_regularizer(-0.01) > g_regularizer(-0.1) > TWO_LN2
    # divergence toward 0- is logarithmic; toward -inf it is linear (~ -x)
    assert g_regularizer(-1e-8) > g_regularizer(-1e-4) > g_regularizer(-0.01)
    assert g_regularizer(-100.0) == pytest.approx(100.0, rel=1e-12)
    xs_left = np.linspace(-12.0, -np.log(2.0) - 2.0, 200)
    assert (np.diff(g_regularizer(xs_left)) < 0).all()
    xs_right = np.linspace(-np.log(2.0) + 0.5, -0.01, 200)
    assert (np.diff(g_regularizer(xs_right)) > 0).all()


def test_g_vector_input():
    out = g_regularizer(np.array([-np.log(2.0), 1.0, -5.0]))
    assert out.shape == (3,)
    assert out[1] == np.inf


# -- training ------------------------------------------------------------------

def separable_fixture(n=24):
    """Generated pairs use token 6; expert pairs use token 7."""
    gen = [pair([BOS, 6, SEP], [6, 6, EOS]) for _ in range(n)]
    exp = [pair([BOS, 7, SEP], [7, 7, EOS]) for _ in range(n)]
    return gen, exp


def test_disc_update_improves_objective_trend():
    disc = make_disc(seed=6, dtype=np.float32)
    opt = AdamW(disc.params, lr=1e-2, weight_decay=0.01)
    gen, exp = separable_fixture()
    values = [disc_update(disc, opt, gen, exp) for _ in range(40)]
    assert np.mean(values[-20:]) > np.mean(values[:20])


def test_trained_disc_separates_fixture():
    disc = make_disc(seed=7, dtype=np.float32)
    opt = AdamW(disc.params, lr=1e-2, weight_decay=0.01)
    gen, exp = separable_fixture()
    for _ in range(300):
        disc_update(disc, opt, gen, exp)
    for s, r in gen:
        assert disc.score(s, r) > 0.9
    value = disc_loss(disc, gen, exp).item()
    assert value > -0.2


def test_zero_lr_disc_update_is_identity():
    disc = make_disc(seed=8)
    opt = AdamW(disc.params, lr=0.0, weight_decay=0.0)
    before = {k: t.data.copy() for k, t in disc.params.items()}
    gen, exp = separable_fixture(4)
    disc_update(disc, opt, gen, exp)
    for k, t in disc.params.items():
        np.testing.assert_array_equal(t.data, before[k])


def test_disc_loss_full_grad_check():
    disc = make_disc(seed=9, dtype=np.float64)
    rng = np.random.default_rng(9)
    gen, exp = some_pairs(rng, 3), some_pairs(rng, 3)

    def loss_fn(*_):
        return disc_loss(disc, gen, exp)

    err = ad.grad_check(loss_fn, list(disc.params.values()), max_coords=8, rng=np.random.default_rng(1))
    assert err < 1e-4
