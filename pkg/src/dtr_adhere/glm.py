"""Nuisance-model fitting: logistic regression by Newton scoring, linear by
least squares, plus per-observation score contributions for stacking into a
joint estimating equation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


class RankDeficiencyError(ValueError):
    """Design (or working) matrix does not have full column rank."""


class NonConvergenceError(RuntimeError):
    """Iterative fit failed to meet its convergence criteria."""


@dataclass(frozen=True)
class GlmFit:
    coefficients: np.ndarray
    converged: bool
    iterations: int
    family: str  # "logistic" | "linear"


def expit(x):
    """Inverse logit, 1 / (1 + exp(-x)), evaluated in a stable branch.

    Saturates to 0.0 / 1.0 in floating point for large |x|; never overflows.
    """
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def _as_matrix(design) -> np.ndarray:
    x = np.asarray(design, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return x


def fit_logistic(
    design,
    response,
    weights: Optional[np.ndarray] = None,
    *,
    max_iter: int = 100,
    score_tol: float = 1e-8,
    step_tol: float = 1e-10,
) -> GlmFit:
    """Maximize the weighted Bernoulli log-likelihood by Newton scoring.

    Converged when the score sup-norm drops below ``score_tol`` or the
    parameter step sup-norm below ``step_tol``.  Complete separation shows up
    as non-convergence with a diverging coefficient norm and is raised, not
    silently accepted.
    """
    x = _as_matrix(design)
    y = np.asarray(response, dtype=float)
    n, p = x.shape
    if y.shape != (n,):
        raise ValueError("response length does not match design rows")
    if n < p:
        raise RankDeficiencyError("fewer rows than columns")
    if np.any((y != 0.0) & (y != 1.0)):
        raise ValueError("logistic response must be 0/1")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")

    def finish(beta, iteration):
        mu = expit(x @ beta)
        if np.max(np.abs(y - mu)) < 1e-4:
            # every observation classified perfectly: the likelihood has no
            # interior maximum and the coefficients are off to infinity
            raise NonConvergenceError(
                "complete separation in logistic fit "
                f"(coefficient norm {np.linalg.norm(beta):.3g})"
            )
        return GlmFit(coefficients=beta, converged=True, iterations=iteration, family="logistic")

    beta = np.zeros(p)
    for iteration in range(1, max_iter + 1):
        mu = expit(x @ beta)
        score = x.T @ (w * (y - mu))
        working = w * mu * (1.0 - mu)
        info = (x * working[:, None]).T @ x
        try:
            chol = np.linalg.cholesky(info)
        except np.linalg.LinAlgError:
            raise RankDeficiencyError(
                "rank-deficient working matrix in logistic fit"
            ) from None
        if np.max(np.abs(score)) < score_tol:
            return finish(beta, iteration)
        step = np.linalg.solve(chol.T, np.linalg.solve(chol, score))
        beta = beta + step
        if np.max(np.abs(beta)) > 1e6:
            raise NonConvergenceError(
                f"diverging logistic coefficients (norm {np.linalg.norm(beta):.3g}; "
                "possible separation)"
            )
        if np.max(np.abs(step)) < step_tol:
            return finish(beta, iteration)
    raise NonConvergenceError(
        f"logistic fit did not converge in {max_iter} iterations "
        f"(coefficient norm {np.linalg.norm(beta):.3g}; possible separation)"
    )


def fit_linear(design, response) -> GlmFit:
    """Least-squares fit via an orthogonal (SVD) decomposition."""
    x = _as_matrix(design)
    y = np.asarray(response, dtype=float)
    n, p = x.shape
    if y.shape != (n,):
        raise ValueError("response length does not match design rows")
    if n < p:
        raise RankDeficiencyError("fewer rows than columns")
    beta, _, rank, _ = np.linalg.lstsq(x, y, rcond=None)
    if rank < p:
        raise RankDeficiencyError(f"design has rank {rank} < {p} columns")
    return GlmFit(coefficients=beta, converged=True, iterations=0, family="linear")


def predict_mean(fit: GlmFit, design) -> np.ndarray:
    x = _as_matrix(design)
    eta = x @ fit.coefficients
    return expit(eta) if fit.family == "logistic" else eta


def score_rows(fit: GlmFit, design, response, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-observation score contributions x_i * (y_i - mu_i) * w_i.

    Column sums vanish (to numerical tolerance) at the fitted coefficients.
    """
    x = _as_matrix(design)
    y = np.asarray(response, dtype=float)
    if y.shape[0] != x.shape[0]:
        raise ValueError("response length does not match design rows")
    mu = predict_mean(fit, x)
    resid = y - mu
    if weights is not None:
        resid = resid * np.asarray(weights, dtype=float)
    return x * resid[:, None]


def logistic_covariance(fit: GlmFit, design, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Inverse Fisher information at the fitted coefficients."""
    x = _as_matrix(design)
    mu = expit(x @ fit.coefficients)
    w = mu * (1.0 - mu)
    if weights is not None:
        w = w * np.asarray(weights, dtype=float)
    info = (x * w[:, None]).T @ x
    return np.linalg.inv(info)
