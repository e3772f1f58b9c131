"""AdamW and warmup-linear schedule contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dialogail.autodiff import Tensor
from dialogail.optim import AdamW, WarmupLinearSchedule


def make_param(value):
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


def test_zero_grad_zero_moments_applies_pure_decay():
    p = make_param([2.0, -1.0])
    opt = AdamW({"p": p}, lr=0.1, weight_decay=0.5)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_allclose(p.data, np.array([2.0, -1.0]) * (1 - 0.1 * 0.5), rtol=1e-12)


def test_zero_grad_no_decay_is_identity():
    p = make_param([2.0, -1.0])
    opt = AdamW({"p": p}, lr=0.1, weight_decay=0.0)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_allclose(p.data, [2.0, -1.0], rtol=0)


def test_single_step_bias_corrected_unit_direction():
    # hand evaluation: m_hat = v_hat = 1 after one step with g = 1
    p = make_param([1.0])
    opt = AdamW({"p": p}, lr=1e-4, weight_decay=0.0)
    p.grad = np.ones(1)
    opt.step()
    assert abs((1.0 - p.data[0]) - 1e-4) < 1e-8
    assert opt.state.step == 1


def test_step_count_increments_by_one():
    p = make_param([1.0])
    opt = AdamW({"p": p}, lr=1e-3)
    for i in range(5):
        p.grad = np.ones(1)
        opt.step()
        assert opt.state.step == i + 1


def test_shape_mismatch_rejected():
    p = make_param([1.0, 2.0])
    opt = AdamW({"p": p}, lr=1e-3)
    p.grad = np.ones(3)
    with pytest.raises(ValueError):
        opt.step()


def test_non_finite_gradient_rejected():
    p = make_param([1.0])
    opt = AdamW({"p": p}, lr=1e-3)
    p.grad = np.array([np.nan])
    with pytest.raises(FloatingPointError):
        opt.step()


@pytest.mark.parametrize("lr", [1e-3, 1e-2])
def test_quadratic_descent_monotone_after_warmup(lr):
    # f(x) = 0.5 * x.x on a fixed start; value must fall monotonically after step 10
    x = make_param(np.array([3.0, -2.0, 1.5]))
    opt = AdamW({"x": x}, lr=lr, weight_decay=0.0)
    values = []
    for _ in range(60):
        values.append(0.5 * float(x.data @ x.data))
        x.grad = x.data.copy()
        opt.step()
    diffs = np.diff(values[10:])
    assert (diffs <= 1e-12).all()


def test_zero_lr_leaves_params_unchanged():
    p = make_param([1.0, -2.0])
    opt = AdamW({"p": p}, lr=0.0)
    p.grad = np.array([5.0, -3.0])
    opt.step()
    np.testing.assert_allclose(p.data, [1.0, -2.0], rtol=0)


def test_schedule_endpoints():
    s = WarmupLinearSchedule(base_lr=0.3, warmup_steps=1000, total_steps=4000)
    assert s.lr_at(0) == 0.0
    assert s.lr_at(500) == pytest.approx(0.15)
    assert s.lr_at(1000) == pytest.approx(0.3)
    assert s.lr_at(4000) == 0.0


def test_schedule_beyond_total_clamps_to_zero(caplog):
    s = WarmupLinearSchedule(base_lr=0.1, warmup_steps=10, total_steps=100)
    with caplog.at_level("WARNING"):
        assert s.lr_at(101) == 0.0
    assert any("clamping" in r.message for r in caplog.records)


def test_schedule_zero_warmup_starts_at_base():
    s = WarmupLinearSchedule(base_lr=0.2, warmup_steps=0, total_steps=10)
    assert s.lr_at(0) == pytest.approx(0.2)
    assert s.lr_at(10) == 0.0


def test_schedule_validation():
    with pytest.raises(ValueError):
        WarmupLinearSchedule(base_lr=0.0, warmup_steps=0, total_steps=10)
    with pytest.raises(ValueError):
        WarmupLinearSchedule(base_lr=0.1, warmup_steps=20, total_steps=10)


@settings(max_examples=60, deadline=None)
@given(
    base=st.floats(min_value=1e-6, max_value=10.0),
    warmup=st.integers(min_value=1, max_value=500),
    extra=st.integers(min_value=1, max_value=500),
    step=st.integers(min_value=0, max_value=999),
)
def test_schedule_continuity(base, warmup, extra, step):
    total = warmup + extra
    s = WarmupLinearSchedule(base_lr=base, warmup_steps=warmup, total_steps=total)
    if step + 1 > total:
        return
    bound = base / min(warmup, total - warmup)
    assert abs(s.lr_at(step + 1) - s.lr_at(step)) <= bound + 1e-12


def test_state_arrays_roundtrip():
    p = make_param([1.0, 2.0])
    opt = AdamW({"p": p}, lr=1e-3)
    p.grad = np.array([0.5, -0.5])
    opt.step()
    arrays = {k: v.copy() for k, v in opt.state_arrays().items()}
    p2 = make_param([1.0, 2.0])
    opt2 = AdamW({"p": p2}, lr=1e-3)
    opt2.load_state_arrays(opt.state.step, arrays)
    assert opt2.state.step == 1
    np.testing.assert_array_equal(opt2.state.m["p"], opt.state.m["p"])
    np.testing.assert_array_equal(opt2.state.v["p"], opt.state.v["p"])
