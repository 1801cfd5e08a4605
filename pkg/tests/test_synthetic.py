import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import cumulative_trapezoid
from scipy.stats import norm

from conftest import make_sample
from ctsls.dataset import CensoredSample
from ctsls.km import StepDistribution, km_censoring
from ctsls.synthetic import (
    DivergenceError,
    WeightVector,
    compute_weights,
    excess_variance,
    leurgans_transform,
    residual_distribution,
    synthetic_variance,
)

FIXTURE_G = StepDistribution([2.0], [0.5])


class _Obs:
    def __init__(self, t, d):
        self.log_time = np.asarray(t, dtype=float)
        self.event = np.asarray(d)


def test_transform_identity_without_censoring(rng):
    s = make_sample(rng, 30)
    ystar = leurgans_transform(s, km_censoring(s))
    np.testing.assert_array_equal(ystar.values, s.log_time)


def test_transform_three_subject_fixture():
    obs = _Obs([1, 2, 3], [1, 0, 1])
    G = km_censoring(obs)
    ystar = leurgans_transform(obs, G)
    np.testing.assert_allclose(ystar.values, [1.0, 2.0, 4.0], rtol=0, atol=1e-15)
    assert ystar.generator_G is G


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10_000))
def test_transform_never_decreases_times(seed):
    s = make_sample(np.random.default_rng(seed), 25, censor_shift=0.5, ties=True)
    ystar = leurgans_transform(s, km_censoring(s))
    assert np.all(ystar.values >= s.log_time)


def test_variance_zero_G_and_point_mass_examples():
    F = StepDistribution([0.0], [1.0])
    assert synthetic_variance(3.0, F, StepDistribution.zero(), 0.7) == 0.7
    # F entirely below the censoring support: outer integrand vanishes
    assert synthetic_variance(0.0, StepDistribution([-5.0], [1.0]), FIXTURE_G, 0.7) == 0.7
    # inner integral is (u - 2) on [2, inf): 2 * integral_2^2.5 (t - 2) dt = 0.25
    assert synthetic_variance(2.5, F, FIXTURE_G, 1.0) == pytest.approx(1.25)


def test_variance_preconditions():
    F = StepDistribution([0.0], [1.0])
    with pytest.raises(ValueError):
        synthetic_variance(0.0, F, FIXTURE_G, 0.0)
    with pytest.raises(ValueError):
        synthetic_variance(0.0, StepDistribution.zero(), FIXTURE_G, 1.0)
    with pytest.raises(DivergenceError):
        synthetic_variance(0.0, StepDistribution([0.0], [0.6]), FIXTURE_G, 1.0)
    G_full = StepDistribution([0.0, 1.0], [0.5, 1.0])
    with pytest.raises(DivergenceError):
        synthetic_variance(0.0, StepDistribution([0.0, 3.0], [0.5, 1.0]), G_full, 1.0)


def _hazard_integral(u, jumps, values, horizon):
    total = 0.0
    knots = list(jumps) + [np.inf]
    for k, c in enumerate(values):
        lo, hi = knots[k], min(knots[k + 1], u, horizon)
        if hi > lo:
            total += (hi - lo) * c / (1 - c)
    return total


def _excess_oracle(mu, F_jumps, F_values, G_jumps, G_values, horizon):
    """Outer integral by exact trapezoids on the merged breakpoint grid."""
    pts = np.concatenate([F_jumps, np.asarray(G_jumps) - mu, [min(horizon, 1e9) - mu]])
    pts = np.unique(pts[pts <= F_jumps[-1]])
    total = 0.0
    for a, b in zip(pts[:-1], pts[1:]):
        mid = 0.5 * (a + b)
        idx = np.searchsorted(F_jumps, mid, side="right") - 1
        surv = 1.0 - (F_values[idx] if idx >= 0 else 0.0)
        ha = _hazard_integral(mu + a, G_jumps, G_values, horizon)
        hb = _hazard_integral(mu + b, G_jumps, G_values, horizon)
        total += surv * 0.5 * (ha + hb) * (b - a)
    return total


@settings(max_examples=120, deadline=None)
@given(st.integers(0, 10_000), st.floats(-2, 2), st.booleans())
def test_excess_variance_matches_merged_grid_oracle(seed, mu, truncate):
    r = np.random.default_rng(seed)
    F_jumps = np.sort(r.normal(size=r.integers(1, 8)))
    F_values = np.cumsum(r.dirichlet(np.ones(F_jumps.size)))
    F_values[-1] = 1.0
    G_jumps = np.sort(r.normal(size=r.integers(1, 6)))
    G_values = np.minimum(np.cumsum(r.uniform(0.05, 0.3, size=G_jumps.size)), 0.9)
    horizon = float(G_jumps[-1] + 0.5) if truncate else np.inf
    F = StepDistribution(F_jumps, F_values)
    G = StepDistribution(G_jumps, G_values, horizon)
    got = excess_variance(mu, F, G)[0]
    expected = _excess_oracle(mu, F_jumps, F.cdf_values, G_jumps, G_values, horizon)
    assert got == pytest.approx(expected, rel=1e-10, abs=1e-12)


def _normal_pair_variance():
    # Y ~ N(0,1), C ~ N(1,1); F and G discretised on a fine midpoint grid
    h = 2e-3
    xs = np.arange(-6.0, 6.0, h)
    F_cdf = norm.cdf(xs + h / 2)
    F_cdf[-1] = 1.0
    F = StepDistribution(xs, F_cdf)
    ts = np.arange(-6.0, 6.5, h)
    G = StepDistribution(ts, norm.cdf(ts + h / 2 - 1.0))
    return synthetic_variance(0.0, F, G, 1.0)


def _continuous_hazard_integral():
    grid = np.linspace(-12.0, 8.0, 400_001)
    H = cumulative_trapezoid(norm.cdf(grid - 1.0) / norm.sf(grid - 1.0), grid, initial=0.0)
    return grid, H


def test_variance_matches_quadrature_oracle():
    # E[Y*^2 | Y=y] = y^2 + 2 int_{-inf}^y H, so Var(Y*) = 1 + 2 E[K(Y)]
    grid, H = _continuous_hazard_integral()
    K = cumulative_trapezoid(H, grid, initial=0.0)
    exact = 1.0 + 2.0 * np.trapezoid(K * norm.pdf(grid), grid)
    assert _normal_pair_variance() == pytest.approx(exact, rel=2e-3)


def test_variance_matches_monte_carlo_oracle():
    formula = _normal_pair_variance()
    grid, H = _continuous_hazard_integral()
    r = np.random.default_rng(2718)
    y = r.normal(size=1_000_000)
    c = 1.0 + r.normal(size=1_000_000)
    obs = np.minimum(y, c)
    ystar = obs + np.interp(obs, grid, H)
    assert abs(ystar.mean()) < 4 * ystar.std() / 1000
    assert formula == pytest.approx(ystar.var(), rel=0.01)


def test_weights_constant_without_censoring(rng):
    s = make_sample(rng, 40)
    F, var_Y = residual_distribution(rng.normal(size=40), np.ones(40))
    w = compute_weights(s, km_censoring(s), F, rng.normal(size=40), var_Y)
    np.testing.assert_allclose(w.weights, 1 / var_Y, rtol=1e-15)


def test_weights_decrease_with_linear_predictor():
    t = np.arange(1.0, 9.0)
    s = CensoredSample(t, [1, 0, 1, 0, 1, 0, 1, 1], t, None, t)
    G = km_censoring(s)
    F = StepDistribution([-1.0, 0.0, 1.0], [0.3, 0.6, 1.0])
    mu = np.linspace(0.0, 7.0, 8)
    w = compute_weights(s, G, F, mu, 0.5).weights
    assert np.all(np.diff(w) <= 0) and w[-1] < w[0]
    direct = [1 / (0.5 + 2 * _excess_oracle(m, F.jump_times, F.cdf_values, G.jump_times, G.cdf_values, G.horizon))
              for m in mu]
    np.testing.assert_allclose(w, direct, rtol=1e-10)
    with pytest.raises(ValueError):
        compute_weights(s, G, F, mu, 0.0)


def test_weight_vector_validation():
    assert len(WeightVector.ones(3)) == 3
    for bad in ([1.0, 0.0], [1.0, -1.0], [1.0, np.inf], [[1.0]]):
        with pytest.raises(ValueError):
            WeightVector(bad)


def test_residual_distribution_closes_tail():
    F, var = residual_distribution([1.0, 2.0, 3.0], [1, 1, 0])
    np.testing.assert_allclose(F.cdf_values, [1 / 3, 1.0])
    m = 1 / 3 + 2 * 2 / 3
    assert var == pytest.approx((1 - m) ** 2 / 3 + (2 - m) ** 2 * 2 / 3)
