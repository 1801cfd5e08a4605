"""Leurgans synthetic outcomes, their variances, and inverse-variance weights."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .dataset import CensoredSample
from .km import StepDistribution, close_tail, hazard_ratio_antiderivative, km_event


class DivergenceError(ArithmeticError):
    """The synthetic-outcome variance integral is unbounded."""


@dataclass(frozen=True)
class SyntheticOutcome:
    values: np.ndarray
    generator_G: StepDistribution


@dataclass(frozen=True)
class WeightVector:
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 1 or not np.all(np.isfinite(w)) or not np.all(w > 0):
            raise ValueError("weights must be a 1-d vector of positive finite values")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.weights.size

    @classmethod
    def ones(cls, n: int) -> "WeightVector":
        return cls(np.ones(n))


def leurgans_transform(sample: CensoredSample, G: StepDistribution) -> SyntheticOutcome:
    """``Y*_i = Y~_i + integral_{-inf}^{Y~_i} G(t-)/(1 - G(t-)) dt``."""
    H = hazard_ratio_antiderivative(G)
    values = sample.log_time + H(sample.log_time)
    values.setflags(write=False)
    return SyntheticOutcome(values, G)


@numba.njit(cache=True)
def _excess_kernel(knots, first, second, slopes, s, p, mu):
    # sum_k p[k] * K(mu[i] + s[k]), walking the sorted knots once per subject
    n = mu.size
    m = s.size
    J = knots.size
    out = np.empty(n)
    for i in range(n):
        j = -1
        acc = 0.0
        for k in range(m):
            u = mu[i] + s[k]
            while j + 1 < J and knots[j + 1] <= u:
                j += 1
            if j >= 0:
                dx = u - knots[j]
                acc += p[k] * (second[j] + first[j] * dx + 0.5 * slopes[j] * dx * dx)
        out[i] = acc
    return out


def excess_variance(mu_Y, F: StepDistribution, G: StepDistribution) -> np.ndarray:
    """``integral {1 - F(s)} integral_{-inf}^{mu + s} G/(1-G) dt ds`` for each ``mu``.

    Integrating by parts against the jumps of ``F`` turns the outer integral
    into ``sum_k P(eps = s_k) K(mu + s_k)``, where ``K`` is the exact
    piecewise-quadratic antiderivative of the inner integral.
    """
    mu = np.atleast_1d(np.asarray(mu_Y, dtype=float))
    if G.is_zero:
        return np.zeros(mu.shape)
    if not F.is_proper:
        raise DivergenceError(
            "residual distribution is improper: 1 - F stays positive over an unbounded range"
        )
    H = hazard_ratio_antiderivative(G)
    p = F.masses
    s = F.jump_times[p > 0]
    p = p[p > 0]
    if mu.size and mu.max() + s[-1] > H.first_bad:
        raise DivergenceError("clamped tail of G intersects the support of the residuals")
    return _excess_kernel(
        H.knots, H.values, H.second, H.slopes, np.ascontiguousarray(s), np.ascontiguousarray(p),
        np.ascontiguousarray(mu),
    )


def synthetic_variance(mu_Y: float, F: StepDistribution, G: StepDistribution, var_Y: float) -> float:
    """Variance of the Leurgans outcome for a subject with linear predictor ``mu_Y``.

    ``var_Y + 2 * integral {1 - F(s)} integral_{-inf}^{mu_Y + s} G/(1-G) dt ds``,
    with ``F`` the error distribution (must reach 1) and ``G`` the censoring CDF.
    """
    if not var_Y > 0:
        raise ValueError(f"var_Y must be positive, got {var_Y}")
    if F.jump_times.size == 0:
        raise ValueError("F has no jumps")
    return float(var_Y + 2.0 * excess_variance(mu_Y, F, G)[0])


def residual_distribution(residuals, event) -> tuple[StepDistribution, float]:
    """Product-limit CDF of censored residuals with its tail closed, and its variance."""
    F = close_tail(km_event(residuals, event))
    return F, F.variance()


def compute_weights(
    sample: CensoredSample,
    G: StepDistribution,
    F_residual: StepDistribution,
    mu_Y,
    var_Y: float,
) -> WeightVector:
    """Inverse synthetic-outcome variances, ``1 / Var(Y*_i)``; not normalized.

    A residual distribution that does not reach 1 gets its remaining mass
    placed at its last jump before use.
    """
    if not var_Y > 0:
        raise ValueError(f"var_Y must be positive, got {var_Y}")
    mu = np.asarray(mu_Y, dtype=float)
    if mu.shape != (sample.n,):
        raise ValueError("mu_Y must have one entry per subject")
    F = close_tail(F_residual)
    return WeightVector(1.0 / (var_Y + 2.0 * excess_variance(mu, F, G)))
