import dataclasses
import math

import numpy as np
import pytest

from bitflip import nn
from bitflip.bop import (BopState, Schedule, bop_init, ema_update, flip_step,
                         schedule_value)


# ---------------------------------------------------------------------------
# init
# ---------------------------------------------------------------------------

def test_init_from_signs():
    st = bop_init((2,), w0=np.array([1.0, -1.0]))
    np.testing.assert_array_equal(st.w, [1.0, -1.0])
    np.testing.assert_array_equal(st.m, [0.0, 0.0])
    assert st.t == 0


def test_init_rejects_non_sign_values():
    with pytest.raises(ValueError, match=r"not \+-1"):
        bop_init((2,), w0=np.array([1.0, 0.5]))


def test_init_random_sign_deterministic():
    a = bop_init((40, 25), seed=7)
    b = bop_init((40, 25), seed=7)
    np.testing.assert_array_equal(a.w, b.w)


def test_init_random_sign_balanced():
    st = bop_init((100, 100), seed=3)
    frac = (st.w > 0).mean()
    assert 0.45 <= frac <= 0.55


def test_init_given_m0():
    st = bop_init((3,), w0=np.array([1.0, 1.0, -1.0]), m0=np.array([0.1, -0.2, 0.0]))
    np.testing.assert_array_equal(st.m, [0.1, -0.2, 0.0])


# ---------------------------------------------------------------------------
# ema_update
# ---------------------------------------------------------------------------

def test_ema_single_step_example():
    np.testing.assert_allclose(ema_update(np.array([0.0]), np.array([1.0]), 0.1),
                               [0.1], rtol=0, atol=0)


def test_ema_gamma_one_adapts_fully():
    m = ema_update(np.array([5.0, -3.0]), np.array([1.0, 2.0]), 1.0)
    np.testing.assert_array_equal(m, [1.0, 2.0])


@pytest.mark.parametrize("gamma", [1e-1, 1e-3])
def test_ema_constant_gradient_closed_form(gamma):
    # from m0=0 under constant g: m_t = g * (1 - (1-gamma)^t)
    g = np.array([0.7])
    m = np.zeros(1)
    for t in range(1, 2001):
        m = ema_update(m, g, gamma)
        expect = 0.7 * (1.0 - (1.0 - gamma) ** t)
        assert abs(m[0] - expect) <= 1e-12


def test_ema_validates():
    with pytest.raises(nn.ShapeError):
        ema_update(np.zeros(2), np.zeros(3), 0.1)
    with pytest.raises(ValueError):
        ema_update(np.zeros(2), np.zeros(2), 0.0)
    with pytest.raises(ValueError):
        ema_update(np.zeros(2), np.zeros(2), 1.5)
    with pytest.raises(ValueError, match="non-finite"):
        ema_update(np.zeros(1), np.array([np.inf]), 0.5)


# ---------------------------------------------------------------------------
# flip_step
# ---------------------------------------------------------------------------

def test_flip_when_ema_strong_and_aligned():
    # gamma=1 makes the post-update EMA equal to g exactly
    st = bop_init((1,), w0=np.array([1.0]))
    flips = flip_step(st, np.array([0.5]), gamma=1.0, tau=0.1)
    np.testing.assert_array_equal(st.w, [-1.0])
    np.testing.assert_array_equal(flips, [0])
    assert st.t == 1


def test_no_flip_when_ema_opposes_weight():
    st = bop_init((1,), w0=np.array([1.0]))
    flips = flip_step(st, np.array([-0.5]), gamma=1.0, tau=0.1)
    np.testing.assert_array_equal(st.w, [1.0])
    assert flips.size == 0


def test_no_flip_at_exact_threshold():
    # strict inequality: |m| == tau does not flip
    st = bop_init((1,), w0=np.array([1.0]))
    flips = flip_step(st, np.array([0.1]), gamma=1.0, tau=0.1)
    np.testing.assert_array_equal(st.w, [1.0])
    assert flips.size == 0


def test_flip_truth_table():
    # sign(m) x sign(w) x (|m| vs tau) over every feasible combination
    cases = []
    for sm in (-1.0, 0.0, 1.0):
        for sw in (-1.0, 1.0):
            if sm == 0.0:
                cases.append((0.0, sw, 0.1, False))        # |m|=0 < tau
                cases.append((0.0, sw, 0.0, False))        # |m|=0 == tau=0, strict
            else:
                cases.append((0.05 * sm, sw, 0.1, False))  # |m| < tau
                cases.append((0.1 * sm, sw, 0.1, False))   # |m| == tau
                cases.append((0.5 * sm, sw, 0.1, sm == sw))  # |m| > tau
    for m_val, w_val, tau, should_flip in cases:
        st = BopState(w=np.array([w_val]), m=np.array([m_val / 1.0]))
        # gamma=1 replaces the EMA with g, so feed g = desired post-EMA m
        flips = flip_step(st, np.array([m_val]), gamma=1.0, tau=tau)
        flipped = flips.size == 1
        assert flipped == should_flip, (m_val, w_val, tau)
        np.testing.assert_array_equal(st.w, [-w_val if should_flip else w_val])


def test_zero_threshold_pins_signs_opposite_ema():
    rng = np.random.default_rng(16)
    st = bop_init((200,), w0=np.where(rng.random(200) < 0.5, 1.0, -1.0))
    g = rng.normal(size=200)
    flip_step(st, g, gamma=0.5, tau=0.0)
    nz = st.m != 0
    assert nz.any()
    np.testing.assert_array_equal(np.sign(st.w[nz]), -np.sign(st.m[nz]))


def test_weak_gradients_never_flip():
    # if every |g_t| <= tau then |m_t| <= tau (convexity) and nothing flips
    rng = np.random.default_rng(17)
    tau = 0.2
    st = bop_init((50,), w0=np.where(rng.random(50) < 0.5, 1.0, -1.0))
    w0 = st.w.copy()
    for _ in range(300):
        g = rng.uniform(-tau, tau, size=50)
        flips = flip_step(st, g, gamma=0.3, tau=tau)
        assert flips.size == 0
        assert np.abs(st.m).max() <= tau
    np.testing.assert_array_equal(st.w, w0)


def test_ema_bounded_by_max_gradient():
    rng = np.random.default_rng(18)
    st = bop_init((5, 6), seed=0)
    gmax = 0.0
    for _ in range(200):
        g = rng.normal(size=(5, 6))
        gmax = max(gmax, np.abs(g).max())
        flip_step(st, g, gamma=rng.uniform(0.01, 1.0), tau=1e-6)
        assert np.abs(st.m).max() <= gmax + 1e-15


def test_signs_stay_exact_after_many_steps():
    rng = np.random.default_rng(19)
    st = bop_init((64, 32), seed=1)
    for _ in range(100):
        flip_step(st, rng.normal(size=(64, 32)), gamma=0.1, tau=1e-4)
    assert np.all(np.abs(st.w) == 1.0)
    assert st.t == 100


def test_flip_time_formula_matches_simulation():
    # constant pressure g aligned with w flips after exactly
    # ceil(ln(1 - tau/|g|) / ln(1 - gamma)) steps from m0 = 0
    rng = np.random.default_rng(20)
    for _ in range(20):
        gamma = rng.uniform(1e-3, 0.5)
        mag = rng.uniform(0.1, 2.0)
        tau = rng.uniform(0.05, 0.9) * mag
        t_star = math.ceil(math.log(1.0 - tau / mag) / math.log(1.0 - gamma))
        st = bop_init((1,), w0=np.array([1.0]))
        flipped_at = None
        for t in range(1, t_star + 10):
            flips = flip_step(st, np.array([mag]), gamma=gamma, tau=tau)
            if flips.size:
                flipped_at = t
                break
        assert flipped_at == t_star, (gamma, mag, tau)


def test_flip_step_error_leaves_state_unmodified():
    st = bop_init((4,), w0=np.ones(4))
    flip_step(st, np.full(4, 0.3), gamma=0.5, tau=0.0)
    w, m, t = st.w.copy(), st.m.copy(), st.t
    with pytest.raises(nn.ShapeError):
        flip_step(st, np.zeros(5), gamma=0.5, tau=0.0)
    with pytest.raises(ValueError):
        flip_step(st, np.zeros(4), gamma=0.5, tau=-1.0)
    np.testing.assert_array_equal(st.w, w)
    np.testing.assert_array_equal(st.m, m)
    assert st.t == t


def test_state_carries_one_real_slot_per_weight():
    st = bop_init((8, 4), seed=0)
    arrays = [f.name for f in dataclasses.fields(BopState)
              if isinstance(getattr(st, f.name), np.ndarray)]
    assert sorted(arrays) == ["m", "w"]
    assert st.m.shape == st.w.shape


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

def test_step_decay_recipe():
    s = Schedule.step_decay(1e-4, 0.1, 100)
    # at epoch 250 two decays have fired
    assert schedule_value(s, step=250 * 10, steps_per_epoch=10) == pytest.approx(1e-6)
    assert schedule_value(s, step=0, steps_per_epoch=10) == 1e-4
    assert schedule_value(s, step=99 * 10, steps_per_epoch=10) == 1e-4


def test_linear_endpoint_and_midpoint():
    t = 1000
    s = Schedule.linear(1e-4, 1e-6, t)
    assert schedule_value(s, t, 1) == pytest.approx(1e-6)
    assert schedule_value(s, t // 2, 1) == pytest.approx(5.05e-5)
    assert schedule_value(s, 10 * t, 1) == pytest.approx(1e-6)  # clamped


def test_constant_schedule():
    s = Schedule.constant(0.25)
    for step in (0, 1, 10_000):
        assert schedule_value(s, step, 7) == 0.25


def test_schedule_rejects_negative_step():
    with pytest.raises(ValueError):
        schedule_value(Schedule.constant(1.0), -1, 10)


def test_schedule_json_roundtrip():
    for s in (Schedule.constant(1e-8), Schedule.step_decay(1e-4, 0.1, 100),
              Schedule.linear(1e-4, 1e-6, 500)):
        assert Schedule.from_json(s.to_json_dict()) == s
    assert Schedule.from_json(3.5) == Schedule.constant(3.5)
