"""Two-stage estimators for censored IV data.

``fit_ctsls`` is the iterative reweighted censored two-stage least squares
estimator; ``fit_cols`` and ``fit_tsls_uncensored`` are comparators.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import scipy.linalg

from . import variance as _variance
from .dataset import CensoredSample
from .km import EPS_CLAMP, km_censoring
from .synthetic import (
    SyntheticOutcome,
    WeightVector,
    compute_weights,
    leurgans_transform,
    residual_distribution,
)


class RankDeficientError(np.linalg.LinAlgError):
    """Design matrix lacks full column rank."""

    def __init__(self, columns, message=None):
        self.columns = tuple(int(c) for c in columns)
        super().__init__(message or f"rank-deficient design; dependent column(s) {list(self.columns)}")


@dataclass(frozen=True)
class ParameterVector:
    """Stacked ``(alpha0, alpha1, alpha2, beta0, beta1, beta2)``.

    The alpha fields are ``None`` for one-stage fits.
    """

    alpha0: float | None
    alpha1: np.ndarray | None
    alpha2: np.ndarray | None
    beta0: float
    beta1: float
    beta2: np.ndarray

    @classmethod
    def from_blocks(cls, alpha: np.ndarray | None, beta: np.ndarray, q: int, p: int) -> "ParameterVector":
        beta = np.asarray(beta, dtype=float)
        if beta.shape != (2 + p,):
            raise ValueError(f"beta must have length {2 + p}")
        if alpha is None:
            return cls(None, None, None, float(beta[0]), float(beta[1]), beta[2:].copy())
        alpha = np.asarray(alpha, dtype=float)
        if alpha.shape != (1 + q + p,):
            raise ValueError(f"alpha must have length {1 + q + p}")
        return cls(
            float(alpha[0]), alpha[1 : 1 + q].copy(), alpha[1 + q :].copy(),
            float(beta[0]), float(beta[1]), beta[2:].copy(),
        )

    @property
    def q(self) -> int:
        return 0 if self.alpha1 is None else self.alpha1.size

    @property
    def p(self) -> int:
        return self.beta2.size

    @property
    def alpha(self) -> np.ndarray | None:
        if self.alpha0 is None:
            return None
        return np.concatenate([[self.alpha0], self.alpha1, self.alpha2])

    @property
    def beta(self) -> np.ndarray:
        return np.concatenate([[self.beta0, self.beta1], self.beta2])

    def stacked(self) -> np.ndarray:
        a = self.alpha
        return self.beta if a is None else np.concatenate([a, self.beta])

    def names(self) -> list[str]:
        beta = ["beta0", "beta1"] + [f"beta2_{j + 1}" for j in range(self.p)]
        if self.alpha0 is None:
            return beta
        alpha = ["alpha0"] + [f"alpha1_{j + 1}" for j in range(self.q)]
        alpha += [f"alpha2_{j + 1}" for j in range(self.p)]
        return alpha + beta


@dataclass(frozen=True)
class FitResult:
    estimator: str
    theta: ParameterVector
    covariance: np.ndarray
    std_errors: np.ndarray
    conf_intervals: np.ndarray
    p_values: np.ndarray
    iterations: int
    converged: bool
    trace: tuple[np.ndarray, ...]
    weights_final: WeightVector
    diagnostics: dict[str, Any] = field(default_factory=dict)
    runtime_s: float = 0.0

    @property
    def names(self) -> list[str]:
        return self.theta.names()

    def index(self, name: str) -> int:
        return self.names.index(name)

    def coef(self, name: str) -> float:
        return float(self.theta.stacked()[self.index(name)])

    @property
    def beta1(self) -> float:
        return self.theta.beta1

    @property
    def beta1_var(self) -> float:
        i = self.index("beta1")
        return float(self.covariance[i, i])

    def to_dict(self) -> dict[str, Any]:
        est = self.theta.stacked()
        return {
            "estimator": self.estimator,
            "coefficients": {
                name: {
                    "estimate": float(est[i]),
                    "std_error": float(self.std_errors[i]),
                    "ci_95": [float(self.conf_intervals[i, 0]), float(self.conf_intervals[i, 1])],
                    "p_value": float(self.p_values[i]),
                }
                for i, name in enumerate(self.names)
            },
            "iterations": self.iterations,
            "converged": self.converged,
            "diagnostics": self.diagnostics,
            "runtime_s": self.runtime_s,
        }


def solve_weighted_ls(design, response, weights) -> np.ndarray:
    """Minimize ``sum_i w_i (y_i - x_i'b)^2`` via pivoted QR of the row-scaled design."""
    X = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    w = np.asarray(weights, dtype=float)
    n, k = X.shape
    if y.shape != (n,) or w.shape != (n,):
        raise ValueError("response and weights must have one entry per design row")
    if n < k:
        raise RankDeficientError(range(n, k), f"n={n} rows cannot identify k={k} coefficients")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("weights must be positive and finite")
    sw = np.sqrt(w)
    Q, R, piv = scipy.linalg.qr(X * sw[:, None], mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = diag[0] * max(n, k) * np.finfo(float).eps if diag.size else 0.0
    rank = int(np.sum(diag > tol))
    if rank < k:
        raise RankDeficientError(sorted(piv[rank:]))
    coef = np.empty(k)
    coef[piv] = scipy.linalg.solve_triangular(R, Q.T @ (y * sw))
    return coef


def stage1_design(sample: CensoredSample) -> np.ndarray:
    return np.column_stack([np.ones(sample.n), sample.instruments, sample.confounders])


def stage2_design(fitted_X, D) -> np.ndarray:
    fitted_X = np.asarray(fitted_X, dtype=float)
    return np.column_stack([np.ones(fitted_X.size), fitted_X, np.reshape(D, (fitted_X.size, -1))])


def stage1_fit(sample: CensoredSample) -> tuple[np.ndarray, np.ndarray]:
    """OLS of the exposure on ``[1, Z, D]``; returns coefficients and fitted exposure."""
    W = stage1_design(sample)
    alpha = solve_weighted_ls(W, sample.exposure, np.ones(sample.n))
    return alpha, W @ alpha


def stage2_fit(synthetic: SyntheticOutcome, fitted_X, D, weights: WeightVector) -> np.ndarray:
    """Weighted LS of the synthetic outcome on ``[1, fitted_X, D]``."""
    V = stage2_design(fitted_X, D)
    return solve_weighted_ls(V, synthetic.values, weights.weights)


def _r_squared(y, fitted) -> float:
    ss_res = float(np.sum((y - fitted) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")


def _finish(estimator, theta, cov, **kw) -> FitResult:
    se, ci, pv = _variance.wald_inference(theta.stacked(), cov)
    return FitResult(estimator, theta, cov, se, ci, pv, **kw)


def fit_ctsls(
    sample: CensoredSample,
    tol: float = 1e-3,
    kmax: int = 10,
    weighted: bool = True,
) -> FitResult:
    """Censored two-stage least squares.

    The censoring distribution and the synthetic outcomes are computed once.
    Stage 1 is weight-free and fit once; with ``weighted`` the stage-2 fit is
    refit with inverse-variance weights until the max-norm change of the
    stacked estimate drops below ``tol`` or ``kmax`` refits have run.
    Non-convergence is reported through ``converged``, not raised.
    """
    if kmax < 1:
        raise ValueError("kmax must be at least 1")
    start = time.perf_counter()
    G = km_censoring(sample)
    ystar = leurgans_transform(sample, G)
    alpha, mu_X = stage1_fit(sample)
    D = sample.confounders
    V = stage2_design(mu_X, D)

    # residual variance at rounding level means an exact fit
    degenerate_var = (1e-10 * max(1.0, float(np.max(np.abs(ystar.values))))) ** 2
    weights = WeightVector.ones(sample.n)
    beta = stage2_fit(ystar, mu_X, D, weights)
    trace = [np.concatenate([alpha, beta])]
    iterations = 0
    converged = True
    var_Y = float("nan")

    if weighted:
        converged = False
        for _ in range(kmax):
            mu_Y = V @ beta
            F, var_Y = residual_distribution(ystar.values - mu_Y, sample.event)
            if var_Y > degenerate_var:
                weights = compute_weights(sample, G, F, mu_Y, var_Y)
            elif G.is_zero:
                weights = WeightVector.ones(sample.n)
            else:
                raise ValueError("degenerate residual distribution (zero variance) under censoring")
            new_beta = stage2_fit(ystar, mu_X, D, weights)
            iterations += 1
            trace.append(np.concatenate([alpha, new_beta]))
            step = float(np.max(np.abs(trace[-1] - trace[-2])))
            beta = new_beta
            if step < tol:
                converged = True
                break

    theta = ParameterVector.from_blocks(alpha, beta, sample.q, sample.p)
    parts = _variance.sandwich(sample, theta, G, ystar, weights)
    diagnostics = {
        "first_stage_r2": _r_squared(sample.exposure, mu_X),
        "censoring_fraction": sample.censoring_fraction,
        "a_hat_condition": parts.condition,
        "improper_tail": bool(np.isfinite(G.horizon)),
        "clamped_pieces": int(np.sum((1.0 - G.cdf_values[G.jump_times < G.horizon]) < EPS_CLAMP)),
        "residual_variance": var_Y,
    }
    return _finish(
        "ctsls_weighted" if weighted else "ctsls_unweighted",
        theta,
        parts.covariance,
        iterations=iterations,
        converged=converged,
        trace=tuple(trace),
        weights_final=weights,
        diagnostics=diagnostics,
        runtime_s=time.perf_counter() - start,
    )


def fit_cols(sample: CensoredSample) -> FitResult:
    """One-stage LS of the synthetic outcome on ``[1, X, D]``, ignoring endogeneity.

    The covariance is the heteroskedasticity-robust (HC0) sandwich treating
    the synthetic outcomes as independent data.
    """
    start = time.perf_counter()
    G = km_censoring(sample)
    ystar = leurgans_transform(sample, G)
    V = stage2_design(sample.exposure, sample.confounders)
    beta = solve_weighted_ls(V, ystar.values, np.ones(sample.n))
    resid = ystar.values - V @ beta
    bread = np.linalg.inv(V.T @ V)
    meat = (V * resid[:, None] ** 2).T @ V
    cov = bread @ meat @ bread
    cov = 0.5 * (cov + cov.T)
    theta = ParameterVector.from_blocks(None, beta, sample.q, sample.p)
    return _finish(
        "cols",
        theta,
        cov,
        iterations=0,
        converged=True,
        trace=(beta,),
        weights_final=WeightVector.ones(sample.n),
        diagnostics={"censoring_fraction": sample.censoring_fraction},
        runtime_s=time.perf_counter() - start,
    )


def fit_tsls_uncensored(sample: CensoredSample) -> FitResult:
    """Classical TSLS with the stacked estimating-equation sandwich.

    Requires every subject to have an observed event.
    """
    if np.any(sample.event == 0):
        raise ValueError("fit_tsls_uncensored requires an uncensored sample")
    start = time.perf_counter()
    n, y, x = sample.n, sample.log_time, sample.exposure
    W = stage1_design(sample)
    alpha = np.linalg.lstsq(W, x, rcond=None)[0]
    x_hat = W @ alpha
    V = stage2_design(x_hat, sample.confounders)
    beta = np.linalg.lstsq(V, y, rcond=None)[0]
    b1 = beta[1]
    y_hat = V @ beta

    k1 = W.shape[1]
    k2 = V.shape[1]
    A = np.zeros((k1 + k2, k1 + k2))
    A[:k1, :k1] = W.T @ W / n
    left = np.column_stack([np.full(n, b1), b1 * x_hat + y_hat - y, b1 * sample.confounders])
    A[k1:, :k1] = left.T @ W / n
    A[k1:, k1:] = V.T @ V / n
    scores = np.hstack([W * (x - x_hat)[:, None], V * (y - y_hat)[:, None]])
    B = scores.T @ scores / n
    A_inv = np.linalg.inv(A)
    cov = A_inv @ B @ A_inv.T / n
    cov = 0.5 * (cov + cov.T)
    theta = ParameterVector.from_blocks(alpha, beta, sample.q, sample.p)
    return _finish(
        "tsls_uncensored",
        theta,
        cov,
        iterations=0,
        converged=True,
        trace=(theta.stacked(),),
        weights_final=WeightVector.ones(n),
        diagnostics={"first_stage_r2": _r_squared(x, x_hat)},
        runtime_s=time.perf_counter() - start,
    )
