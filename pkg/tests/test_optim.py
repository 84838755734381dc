from fractions import Fraction

import numpy as np
import pytest

from lota.optim import (
    ScheduleError,
    SigmaSchedule,
    TSignState,
    clip_by_global_norm,
    nearest_rank,
    select_updates,
    sgd_step,
    sigma_at,
    tsign_step,
)


def fixed(pct, total=10):
    return TSignState(SigmaSchedule(total, start_pct=pct, end_pct=pct, tail_pct=pct))


def brute_rank(n, pct):
    """Smallest k with k/n covering pct percent, walking k upward."""
    target = Fraction(repr(pct))
    for k in range(1, n + 1):
        if Fraction(100 * k, n) >= target:
            return k
    return n


def test_sigma_schedule_values():
    sch = SigmaSchedule(100)
    assert sigma_at(sch, 0) == 5.0
    assert sigma_at(sch, 40) == pytest.approx(2.55, abs=1e-12)
    assert sigma_at(sch, 79) == pytest.approx(5.0 - 4.9 * 79 / 80)
    for t in range(80, 101):
        assert sigma_at(sch, t) == 0.01
    with pytest.raises(ScheduleError):
        sigma_at(sch, 101)
    with pytest.raises(ScheduleError):
        sigma_at(sch, -1)


def test_schedule_validation():
    with pytest.raises(ScheduleError):
        SigmaSchedule(10, start_pct=0.05, end_pct=0.1)
    with pytest.raises(ScheduleError):
        SigmaSchedule(10, decay_fraction=0)
    with pytest.raises(ScheduleError):
        TSignState(SigmaSchedule(10), tau=0)


def test_custom_schedule():
    sch = SigmaSchedule(10, start_pct=10, end_pct=2, decay_fraction=0.5, tail_pct=1)
    assert [sigma_at(sch, t) for t in (0, 1, 4, 5, 10)] == pytest.approx([10, 8.4, 3.6, 1, 1])


def test_nearest_rank_matches_brute_force():
    for n in (1, 3, 4, 7, 100, 1000, 4096):
        for pct in (0.01, 0.1, 2.55, 5.0, 25.0, 33.3, 100.0):
            assert nearest_rank(n, pct) == brute_rank(n, pct)


def test_selected_elements_flip_against_gradient_sign():
    st = fixed(100.0)
    assert tsign_step(np.array([0, 0], np.int8), np.array([0.5, -0.5]), st).tolist() == [-1, 1]
    assert tsign_step(np.array([-1, 1], np.int8), np.array([0.7, -0.7]), st).tolist() == [-1, 1]
    assert tsign_step(np.array([1, -1], np.int8), np.array([0.7, -0.7]), st).tolist() == [0, 0]


def test_quarter_percentile_selects_top_one_of_four():
    out = tsign_step(np.zeros(4, np.int8), np.array([0.9, 0.5, 0.1, 0.05]), fixed(25.0))
    assert out.tolist() == [-1, 0, 0, 0]


def test_ties_at_the_cut_are_all_included():
    sel = select_updates(np.array([1.0, -1.0, 1.0, 0.5]), 25.0, 1e-9)
    assert sel.tolist() == [True, True, True, False]


def test_tau_floor_blocks_tiny_gradients():
    out = tsign_step(np.zeros(6, np.int8), np.full(6, 1e-12), fixed(100.0))
    assert not out.any()
    sel = select_updates(np.array([2e-9, 5e-10, 0.0]), 100.0, 1e-9)
    assert sel.tolist() == [True, False, False]


def test_zero_gradient_never_moves(rng):
    p = rng.integers(-1, 2, size=50).astype(np.int8)
    assert np.array_equal(tsign_step(p, np.zeros(50), fixed(100.0)), p)


def test_closure_and_counts_over_many_steps(rng):
    state = TSignState(SigmaSchedule(2000))
    p = rng.integers(-1, 2, size=(16, 8)).astype(np.int8)
    for _ in range(2000):
        g = rng.normal(size=p.shape)
        sel = select_updates(g, state.pct, state.tau)
        assert sel.sum() == brute_rank(p.size, state.pct)
        new = tsign_step(p, g, state)
        assert np.count_nonzero(new != p) <= sel.sum()
        assert np.all(np.abs(g[new != p]) > state.tau)
        p = new
        state.advance()
    assert set(np.unique(p)) <= {-1, 0, 1}


@pytest.mark.parametrize("c", [1e-3, 0.37, 1.0, 1e3])
def test_scale_invariance(rng, c):
    state = fixed(5.0)
    for _ in range(50):
        p = rng.integers(-1, 2, size=(32, 4)).astype(np.int8)
        g = rng.normal(size=p.shape)
        assert np.array_equal(tsign_step(p, c * g, state), tsign_step(p, g, state))


def test_tsign_errors():
    with pytest.raises(ValueError):
        tsign_step(np.zeros(3, np.int8), np.zeros(4), fixed(5.0))
    with pytest.raises(ValueError):
        tsign_step(np.array([2], np.int8), np.zeros(1), fixed(5.0))


def test_deterministic(rng):
    p = rng.integers(-1, 2, size=100).astype(np.int8)
    g = rng.normal(size=100)
    assert np.array_equal(tsign_step(p, g, fixed(7.0)), tsign_step(p.copy(), g.copy(), fixed(7.0)))


def test_sgd_zero_lr_is_identity(rng):
    p = [rng.normal(size=(3, 2)), rng.normal(size=4)]
    out = sgd_step(p, [np.ones((3, 2)), np.ones(4)], 0.0, 0.3)
    assert all(np.array_equal(a, b) for a, b in zip(out, p))


def test_sgd_clipping_halves_the_step():
    p = [np.zeros(2)]
    g = [np.array([0.36, 0.48])]  # norm 0.6
    clipped, norm = clip_by_global_norm(g, 0.3)
    assert norm == pytest.approx(0.6)
    np.testing.assert_allclose(clipped[0], [0.18, 0.24])
    np.testing.assert_allclose(sgd_step(p, g, 1.0, 0.3)[0], [-0.18, -0.24])
    np.testing.assert_allclose(sgd_step(p, g, 1.0, None)[0], [-0.36, -0.48])
    np.testing.assert_allclose(sgd_step(p, g, 1.0, 1.0)[0], [-0.36, -0.48])


def test_sgd_quadratic_converges():
    # loss (p - 3)^2 has gradient 2 (p - 3); each step scales the error by 0.8
    p = [np.array([10.0])]
    for t in range(1, 201):
        p = sgd_step(p, [2 * (p[0] - 3.0)], 0.1)
        if t == 50:
            assert p[0][0] - 3.0 == pytest.approx(7 * 0.8**50, rel=1e-9)
    assert abs(p[0][0] - 3.0) < 1e-6
