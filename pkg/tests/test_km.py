import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import brute_inverse_survival_integral, brute_km
from ctsls.km import (
    EPS_CLAMP,
    ClampError,
    StepDistribution,
    close_tail,
    integrate_hazard_ratio,
    inverse_survival_antiderivative,
    km_censoring,
    km_event,
)


class _Obs:
    def __init__(self, t, d):
        self.log_time = np.asarray(t, dtype=float)
        self.event = np.asarray(d)


def test_no_censoring_gives_zero_G():
    G = km_censoring(_Obs([1, 2, 3], [1, 1, 1]))
    assert G.is_zero
    assert G(10.0) == 0.0


def test_single_censoring_in_middle():
    G = km_censoring(_Obs([1, 2, 3], [1, 0, 1]))
    np.testing.assert_array_equal(G.jump_times, [2.0])
    np.testing.assert_array_equal(G.cdf_values, [0.5])
    assert G(1.999) == 0.0 and G(2.0) == 0.5 and G(100.0) == 0.5
    assert not np.isfinite(G.horizon)


def test_all_censored_reaches_one_with_horizon():
    G = km_censoring(_Obs([1, 2], [0, 0]))
    np.testing.assert_array_equal(G.cdf_values, [0.5, 1.0])
    assert G(1.5) == 0.5 and G(2.0) == 1.0
    assert G.horizon == 2.0
    # integrals stop at the horizon instead of diverging
    assert integrate_hazard_ratio(G, 2.0) == pytest.approx(1.0)
    assert integrate_hazard_ratio(G, 50.0) == pytest.approx(1.0)


def test_improper_tail_truncates_at_last_event():
    G = km_censoring(_Obs([1, 2, 3, 4], [1, 1, 0, 0]))
    np.testing.assert_array_equal(G.cdf_values, [0.5, 1.0])
    assert G.horizon == 2.0
    assert integrate_hazard_ratio(G, 4.0) == 0.0
    G = km_censoring(_Obs([1, 2, 3, 4, 5], [1, 0, 1, 0, 0]))
    # G = 0.25 on [2, 4), 0.625 on [4, 5), 1 from 5; truncated at 3
    assert G.horizon == 3.0
    assert integrate_hazard_ratio(G, 5.0) == pytest.approx(0.25 / 0.75)


def test_km_event_examples():
    F = km_event([0.1, 0.5, 0.9], [1, 1, 1])
    np.testing.assert_allclose(F.cdf_values, [1 / 3, 2 / 3, 1.0])
    F = km_event([1, 2, 3], [1, 0, 1])
    np.testing.assert_array_equal(F.jump_times, [1.0, 3.0])
    np.testing.assert_allclose(F.cdf_values, [1 / 3, 1.0])
    F = km_event([0.0], [1])
    assert F(0.0) == 1.0 and F.left_limit(0.0) == 0.0
    with pytest.raises(ValueError, match="zero events"):
        km_event([1.0, 2.0], [0, 0])


def test_empty_sample_rejected():
    with pytest.raises(ValueError, match="empty"):
        km_censoring(_Obs([], []))


def test_ties_events_before_censorings():
    # at t=2 one event and one censoring tie; risk set {2,2,3} for both curves
    G = km_censoring(_Obs([1, 2, 2, 3], [1, 1, 0, 1]))
    np.testing.assert_allclose(G.cdf_values, [1 / 3])
    F = km_event([1, 2, 2, 3], [1, 1, 0, 1])
    np.testing.assert_allclose(F.cdf_values, [0.25, 1 - 0.75 * (2 / 3), 1.0])


def test_integrate_hazard_ratio_examples():
    assert integrate_hazard_ratio(StepDistribution.zero(), 5.0) == 0.0
    G = StepDistribution([2.0], [0.5])
    assert integrate_hazard_ratio(G, 3.0) == pytest.approx(1.0)
    assert integrate_hazard_ratio(G, 2.0) == 0.0
    assert integrate_hazard_ratio(G, -1.0) == 0.0
    G = StepDistribution([0.0, 1.0], [0.5, 0.75])
    assert integrate_hazard_ratio(G, 2.0) == pytest.approx(1.0 + 3.0)


def test_clamp_guard():
    G = StepDistribution([0.0, 1.0], [0.5, 1.0 - EPS_CLAMP / 10])
    assert integrate_hazard_ratio(G, 1.0) == pytest.approx(1.0)
    with pytest.raises(ClampError):
        integrate_hazard_ratio(G, 1.5)


def test_left_limit_and_support_floor():
    G = StepDistribution([1.0, 2.0], [0.0, 0.4])
    assert G.left_limit(1.0) == 0.0
    assert G.left_limit(2.0) == 0.0 and G(2.0) == 0.4
    assert G.support_floor == 2.0
    assert StepDistribution([1.0], [0.3]).left_limit(1.0) == 0.0


def test_invalid_step_distribution():
    with pytest.raises(ValueError):
        StepDistribution([2.0, 1.0], [0.1, 0.2])
    with pytest.raises(ValueError):
        StepDistribution([1.0, 2.0], [0.3, 0.2])
    with pytest.raises(ValueError):
        StepDistribution([1.0], [1.2])


def test_close_tail_and_moments():
    F = close_tail(km_event([1, 2, 3], [1, 1, 0]))
    np.testing.assert_allclose(F.cdf_values, [1 / 3, 1.0])
    assert F.mean() == pytest.approx(1 / 3 + 2 * 2 / 3)
    with pytest.raises(ValueError):
        km_event([1, 2, 3], [1, 1, 0]).mean()


times = st.lists(st.integers(0, 12), min_size=1, max_size=25)


@settings(max_examples=150, deadline=None)
@given(times, st.data())
def test_product_limit_matches_brute_force(ts, data):
    ev = data.draw(st.lists(st.integers(0, 1), min_size=len(ts), max_size=len(ts)))
    t = np.array(ts, dtype=float) / 3.0
    d = np.array(ev)
    G = km_censoring(_Obs(t, d))
    bj, bv = brute_km(t, d == 0)
    np.testing.assert_array_equal(G.jump_times, bj)
    np.testing.assert_allclose(G.cdf_values, bv, rtol=0, atol=1e-14)
    assert np.all(np.diff(G.cdf_values) >= 0) and np.all(G.cdf_values <= 1)
    if d.any():
        F = km_event(t, d)
        fj, fv = brute_km(t, d == 1)
        np.testing.assert_array_equal(F.jump_times, fj)
        np.testing.assert_allclose(F.cdf_values, fv, rtol=0, atol=1e-14)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(-5, 5), min_size=1, max_size=8, unique=True),
    st.lists(st.floats(0.01, 0.9), min_size=8, max_size=8),
    st.floats(-6, 6),
    st.floats(-6, 6),
)
def test_inverse_survival_integral_matches_loop(js, incs, a, b):
    jumps = np.sort(np.array(js))
    values = np.minimum(np.cumsum(np.array(incs[: jumps.size]) / 3), 0.95)
    G = StepDistribution(jumps, values)
    L = inverse_survival_antiderivative(G)
    lo, hi = min(a, b), max(a, b)
    expected = brute_inverse_survival_integral(lo, hi, jumps, values)
    assert float(L(hi) - L(lo)) == pytest.approx(expected, rel=1e-10, abs=1e-10)
