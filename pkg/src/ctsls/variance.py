"""Sandwich covariance for cTSLS, including the censoring-estimation correction.

The per-subject score for the second stage is augmented by a martingale term
that accounts for replacing the censoring distribution by its product-limit
estimate. All assembly is conditional on the final weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from scipy.stats import norm

from .dataset import CensoredSample
from .km import StepDistribution, inverse_survival_antiderivative

if TYPE_CHECKING:
    from .estimator import ParameterVector
    from .synthetic import SyntheticOutcome, WeightVector


@dataclass(frozen=True)
class ScoreContribs:
    psi1: np.ndarray
    psi2: np.ndarray
    psi2_star: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.hstack([self.psi1, self.psi2 + self.psi2_star])


@dataclass(frozen=True)
class SandwichParts:
    a_hat: np.ndarray
    b_hat: np.ndarray
    covariance: np.ndarray
    condition: float


def _linear_predictors(sample: CensoredSample, theta: "ParameterVector"):
    W = np.column_stack([np.ones(sample.n), sample.instruments, sample.confounders])
    mu_X = W @ theta.alpha
    V = np.column_stack([np.ones(sample.n), mu_X, sample.confounders])
    mu_Y = V @ theta.beta
    return W, V, mu_X, mu_Y


def martingale_correction(
    log_time: np.ndarray, event: np.ndarray, G: StepDistribution, wv: np.ndarray
) -> np.ndarray:
    """Per-subject correction ``sum_s h(s) (dN_j(s) - Y_j(s) dN(s)/Y(s))``.

    ``wv`` holds the rows ``w_i v_i``. ``h(s)`` averages
    ``w_i v_i 1{s < T_i} integral_s^{T_i} dt / (1 - G(t))`` over the risk set at
    each distinct censoring time ``s``. Suffix sums make this ``O(n log n)``.
    """
    n, k = wv.shape
    cens = event == 0
    if not np.any(cens):
        return np.zeros((n, k))
    s, dN = np.unique(log_time[cens], return_counts=True)
    L = inverse_survival_antiderivative(G)

    order = np.argsort(log_time, kind="stable")
    t_sorted = log_time[order]
    wv_sorted = wv[order]
    lam = L(t_sorted)
    # suffix sums over subjects at index >= m in time order; trailing zero row
    suffix_wl = np.vstack([np.cumsum((wv_sorted * lam[:, None])[::-1], axis=0)[::-1], np.zeros((1, k))])
    suffix_w = np.vstack([np.cumsum(wv_sorted[::-1], axis=0)[::-1], np.zeros((1, k))])

    strictly_after = np.searchsorted(t_sorted, s, side="right")
    at_risk = n - np.searchsorted(t_sorted, s, side="left")
    numer = suffix_wl[strictly_after] - L(s)[:, None] * suffix_w[strictly_after]
    h = numer / at_risk[:, None]

    compensator = np.cumsum(h * (dN / at_risk)[:, None], axis=0)
    upto = np.searchsorted(s, log_time, side="right") - 1
    out = -np.where(upto[:, None] >= 0, compensator[np.maximum(upto, 0)], 0.0)
    own = np.searchsorted(s, log_time[cens])
    out[cens] += h[own]
    return out


def score_contributions(
    sample: CensoredSample,
    theta: "ParameterVector",
    G: StepDistribution,
    synthetic: "SyntheticOutcome",
    weights: "WeightVector",
) -> ScoreContribs:
    W, V, mu_X, mu_Y = _linear_predictors(sample, theta)
    w = weights.weights
    psi1 = W * (sample.exposure - mu_X)[:, None]
    psi2 = V * (w * (synthetic.values - mu_Y))[:, None]
    psi2_star = martingale_correction(sample.log_time, sample.event, G, V * w[:, None])
    return ScoreContribs(psi1, psi2, psi2_star)


def assemble_a_hat(
    sample: CensoredSample,
    theta: "ParameterVector",
    synthetic: "SyntheticOutcome",
    weights: "WeightVector",
) -> np.ndarray:
    """Minus the averaged Jacobian of the stacked estimating function."""
    W, V, mu_X, mu_Y = _linear_predictors(sample, theta)
    w = weights.weights
    n = sample.n
    b1 = theta.beta1
    k1, k2 = W.shape[1], V.shape[1]
    A = np.zeros((k1 + k2, k1 + k2))
    A[:k1, :k1] = W.T @ W / n
    left = np.column_stack(
        [np.full(n, b1), b1 * mu_X + mu_Y - synthetic.values, b1 * sample.confounders]
    )
    A[k1:, :k1] = (left * w[:, None]).T @ W / n
    A[k1:, k1:] = (V * w[:, None]).T @ V / n
    return A


def assemble_b_hat(contribs: ScoreContribs) -> np.ndarray:
    S = contribs.stacked()
    B = S.T @ S / S.shape[0]
    return 0.5 * (B + B.T)


def sandwich(
    sample: CensoredSample,
    theta: "ParameterVector",
    G: StepDistribution,
    synthetic: "SyntheticOutcome",
    weights: "WeightVector",
) -> SandwichParts:
    """``A^-1 B A^-T / n`` at the fitted parameters."""
    A = assemble_a_hat(sample, theta, synthetic, weights)
    B = assemble_b_hat(score_contributions(sample, theta, G, synthetic, weights))
    cond = float(np.linalg.cond(A))
    if not np.isfinite(cond) or cond > 1e14:
        raise np.linalg.LinAlgError(f"A-hat is numerically singular (condition number {cond:.3g})")
    A_inv = np.linalg.solve(A, np.eye(A.shape[0]))
    cov = A_inv @ B @ A_inv.T / sample.n
    return SandwichParts(A, B, 0.5 * (cov + cov.T), cond)


def wald_inference(theta, covariance, level: float = 0.95):
    """Normal-theory standard errors, confidence intervals and two-sided p-values."""
    theta = np.asarray(theta, dtype=float)
    diag = np.diag(np.asarray(covariance, dtype=float))
    if np.any(diag < 0):
        bad = int(np.flatnonzero(diag < 0)[0])
        raise ValueError(f"negative variance at index {bad}")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    se = np.sqrt(diag)
    z = norm.ppf(1 - (1 - level) / 2)
    ci = np.column_stack([theta - z * se, theta + z * se])
    with np.errstate(divide="ignore", invalid="ignore"):
        stat = np.abs(theta) / se
    stat = np.where(se > 0, stat, np.where(theta == 0, 0.0, np.inf))
    p = 2 * norm.sf(stat)
    return se, ci, p
