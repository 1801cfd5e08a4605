"""Product-limit estimation and exact integration of step distributions.

A :class:`StepDistribution` is a right-continuous piecewise-constant CDF.
Its value on ``[jump_times[k], jump_times[k + 1])`` is ``cdf_values[k]``
and it is zero below ``jump_times[0]``.

Tie convention: at a tied time, events precede censorings, so every subject
with ``time >= t`` is in the risk set at ``t`` for either product-limit curve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import CensoredSample

EPS_CLAMP = 1e-8


class ClampError(ArithmeticError):
    """An integrand ``1 / (1 - G)`` was needed where ``1 - G`` is (nearly) zero."""


@dataclass(frozen=True)
class StepDistribution:
    """Right-continuous step CDF.

    Attributes
    ----------
    jump_times : ndarray
        Strictly increasing jump locations.
    cdf_values : ndarray
        CDF value on ``[jump_times[k], jump_times[k+1])``.
    horizon : float
        Integrals of ``G/(1-G)`` and ``1/(1-G)`` are truncated here; set by
        :func:`km_censoring` to the largest event time when the largest
        observation is censored.
    """

    jump_times: np.ndarray
    cdf_values: np.ndarray
    horizon: float = np.inf

    def __post_init__(self):
        t = np.array(self.jump_times, dtype=float)
        c = np.array(self.cdf_values, dtype=float)
        if t.ndim != 1 or t.shape != c.shape:
            raise ValueError("jump_times and cdf_values must be 1-d arrays of equal length")
        if t.size and np.any(np.diff(t) <= 0):
            raise ValueError("jump_times must be strictly increasing")
        if np.any(c < 0) or np.any(c > 1) or np.any(np.diff(c) < 0):
            raise ValueError("cdf_values must be non-decreasing within [0, 1]")
        t.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "jump_times", t)
        object.__setattr__(self, "cdf_values", c)

    @classmethod
    def zero(cls) -> "StepDistribution":
        return cls(np.empty(0), np.empty(0))

    @property
    def is_zero(self) -> bool:
        return self.jump_times.size == 0 or self.cdf_values[-1] == 0.0

    @property
    def is_proper(self) -> bool:
        return self.cdf_values.size > 0 and self.cdf_values[-1] == 1.0

    @property
    def support_floor(self) -> float:
        """Largest ``t`` with CDF equal to 0 (``G^{-1}(0)``)."""
        positive = np.flatnonzero(self.cdf_values > 0)
        return float(self.jump_times[positive[0]]) if positive.size else np.inf

    @property
    def masses(self) -> np.ndarray:
        return np.diff(self.cdf_values, prepend=0.0)

    def __call__(self, t):
        idx = np.searchsorted(self.jump_times, t, side="right") - 1
        vals = np.where(idx >= 0, self.cdf_values[np.maximum(idx, 0)], 0.0) if self.jump_times.size else np.zeros_like(np.asarray(t, dtype=float))
        return vals if np.ndim(t) else float(vals)

    def left_limit(self, t):
        """CDF value just below ``t``."""
        idx = np.searchsorted(self.jump_times, t, side="left") - 1
        vals = np.where(idx >= 0, self.cdf_values[np.maximum(idx, 0)], 0.0) if self.jump_times.size else np.zeros_like(np.asarray(t, dtype=float))
        return vals if np.ndim(t) else float(vals)

    def mean(self) -> float:
        if not self.is_proper:
            raise ValueError("mean of an improper distribution")
        return float(np.dot(self.masses, self.jump_times))

    def variance(self) -> float:
        m = self.mean()
        return float(np.dot(self.masses, (self.jump_times - m) ** 2))


def _product_limit(times: np.ndarray, hits: np.ndarray) -> StepDistribution:
    times = np.asarray(times, dtype=float)
    hits = np.asarray(hits).astype(bool)
    if times.size == 0:
        raise ValueError("empty sample")
    uniq, inverse = np.unique(times, return_inverse=True)
    counts = np.bincount(inverse, minlength=uniq.size)
    d = np.bincount(inverse, weights=hits, minlength=uniq.size)
    at_risk = counts[::-1].cumsum()[::-1]
    keep = d > 0
    factors = 1.0 - d[keep] / at_risk[keep]
    surv = np.cumprod(factors)
    return StepDistribution(uniq[keep], 1.0 - surv)


def km_censoring(sample: CensoredSample) -> StepDistribution:
    """Product-limit estimate of the censoring CDF ``G`` from ``(time, 1 - event)``."""
    G = _product_limit(sample.log_time, sample.event == 0)
    if G.is_proper:
        # largest observation censored: G reaches 1, so integrals stop at the
        # largest event time (or at the last censoring if there are no events)
        events = np.asarray(sample.log_time)[np.asarray(sample.event) == 1]
        horizon = float(events.max()) if events.size else float(G.jump_times[-1])
        return StepDistribution(G.jump_times, G.cdf_values, horizon=horizon)
    return G


def km_event(values, event) -> StepDistribution:
    """Product-limit CDF treating ``event == 1`` as the event of interest."""
    values = np.asarray(values, dtype=float)
    event = np.asarray(event)
    if values.shape != event.shape:
        raise ValueError("values and event must have equal lengths")
    if not np.any(event == 1):
        raise ValueError("zero events")
    return _product_limit(values, event == 1)


def close_tail(F: StepDistribution) -> StepDistribution:
    """Assign any mass beyond the last jump to the last jump value."""
    if F.jump_times.size == 0:
        raise ValueError("distribution has no jumps")
    if F.is_proper:
        return F
    c = F.cdf_values.copy()
    c[-1] = 1.0
    return StepDistribution(F.jump_times, c, F.horizon)


class _Antiderivative:
    """Exact antiderivative of a piecewise-constant function of ``G(t-)``.

    The integrand equals ``below`` left of the first jump, ``piece[k]`` on
    ``[t_k, t_{k+1})`` and zero beyond ``G.horizon``. Values are anchored to 0
    at the first jump (or at 0 when ``G`` has no jumps). Pieces flagged ``bad``
    (``1 - G < EPS_CLAMP``) may not be entered.
    """

    def __init__(self, G: StepDistribution, piece: np.ndarray, below: float, bad: np.ndarray):
        t, h = G.jump_times, G.horizon
        keep = t < h
        knots, slopes, bad = t[keep], np.where(bad, 0.0, piece)[keep], bad[keep]
        if np.isfinite(h):
            knots, slopes, bad = np.append(knots, h), np.append(slopes, 0.0), np.append(bad, False)
        if knots.size == 0:
            knots, slopes, bad = np.array([0.0]), np.array([below]), np.array([False])
        self.knots = knots
        self.slopes = slopes
        self.below = below
        self.first_bad = float(knots[bad][0]) if bad.any() else np.inf
        widths = np.diff(knots)
        self.values = np.concatenate([[0.0], np.cumsum(slopes[:-1] * widths)])
        self.second = np.concatenate(
            [[0.0], np.cumsum(self.values[:-1] * widths + 0.5 * slopes[:-1] * widths**2)]
        )

    def _locate(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x > self.first_bad):
            raise ClampError(
                f"1 - G(t-) < {EPS_CLAMP:g} on an interval of positive length below the integration limit"
            )
        idx = np.searchsorted(self.knots, x, side="right") - 1
        j = np.clip(idx, 0, None)
        return x, idx, j, x - self.knots[j]

    def __call__(self, x):
        x, idx, j, dx = self._locate(x)
        return np.where(idx >= 0, self.values[j] + self.slopes[j] * dx, self.below * (x - self.knots[0]))

    def second_integral(self, x):
        """Integral of ``self`` from ``-inf`` to ``x``; requires ``below == 0``."""
        if self.below != 0.0:
            raise ValueError("second integral diverges for a nonzero left integrand")
        x, idx, j, dx = self._locate(x)
        return np.where(idx >= 0, self.second[j] + self.values[j] * dx + 0.5 * self.slopes[j] * dx**2, 0.0)


def _one_minus(G: StepDistribution) -> tuple[np.ndarray, np.ndarray]:
    surv = 1.0 - G.cdf_values
    bad = surv < EPS_CLAMP
    return np.maximum(surv, EPS_CLAMP), bad


def hazard_ratio_antiderivative(G: StepDistribution) -> _Antiderivative:
    """``u -> integral_{-inf}^{u} G(t-)/(1 - G(t-)) dt`` as an exact piecewise-linear map."""
    surv, bad = _one_minus(G)
    return _Antiderivative(G, G.cdf_values / surv, 0.0, bad)


def inverse_survival_antiderivative(G: StepDistribution) -> _Antiderivative:
    """``u -> integral_{t0}^{u} dt / (1 - G(t-))``, anchored at the first jump ``t0``."""
    surv, bad = _one_minus(G)
    return _Antiderivative(G, 1.0 / surv, 1.0, bad)


def integrate_hazard_ratio(G: StepDistribution, upper: float) -> float:
    """Exact ``integral_{-inf}^{upper-} G(t-)/(1 - G(t-)) dt`` over the constant pieces of ``G``."""
    return float(hazard_ratio_antiderivative(G)(upper))
