"""Variance estimation for the stacked estimator and bootstrap intervals.

The sandwich estimator differentiates the mean stacked score numerically
(central differences), inverts it as the bread, and uses the mean outer
product of per-individual scores as the meat.  The nonparametric bootstrap
resamples whole trajectories and refits the entire pipeline, adherence models
included, per replicate.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from statistics import NormalDist
from typing import Callable, Optional, Sequence

import numpy as np

from .gest import EstimationPlan, RegimeFit, build_stacked_score, psi_flat
from .model import Dataset


class SandwichError(RuntimeError):
    """Sandwich assembly failed (non-finite scores or singular bread)."""


class BootstrapError(RuntimeError):
    """Too many bootstrap replicates failed to refit."""


@dataclass(frozen=True)
class SandwichResult:
    sigma_theta: np.ndarray
    sigma_psi: np.ndarray
    bread_condition: float
    theta_names: Optional[tuple] = None
    psi_names: Optional[tuple] = None


@dataclass(frozen=True)
class IntervalSet:
    names: tuple
    lower: np.ndarray
    estimate: np.ndarray
    upper: np.ndarray
    level: float
    method: str  # "wald-sandwich" | "bootstrap-percentile"
    n_failed: int = 0

    def rows(self) -> list:
        return [
            {
                "parameter": name,
                "lower": float(lo),
                "estimate": float(est),
                "upper": float(hi),
            }
            for name, lo, est, hi in zip(self.names, self.lower, self.estimate, self.upper)
        ]


def numerical_jacobian(f: Callable, theta, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a vector-valued function.

    Column k uses step ``h = step * max(1, |theta_k|)``.
    """
    theta = np.asarray(theta, dtype=float)
    base = np.asarray(f(theta), dtype=float)
    if not np.all(np.isfinite(base)):
        raise SandwichError("function is not finite at the expansion point")
    jac = np.empty((base.shape[0], theta.shape[0]))
    for k in range(theta.shape[0]):
        h = step * max(1.0, abs(theta[k]))
        up, down = theta.copy(), theta.copy()
        up[k] += h
        down[k] -= h
        f_up = np.asarray(f(up), dtype=float)
        f_down = np.asarray(f(down), dtype=float)
        if not (np.all(np.isfinite(f_up)) and np.all(np.isfinite(f_down))):
            raise SandwichError(f"non-finite evaluation while differentiating component {k}")
        jac[:, k] = (f_up - f_down) / (2.0 * h)
    return jac


def sandwich(
    score: Callable,
    theta_hat,
    *,
    psi_index=None,
    step: float = 1e-6,
    theta_names=None,
) -> SandwichResult:
    """Sandwich covariance for a stacked estimating equation.

    ``score(theta)`` must return the (n, P) matrix of per-individual score
    contributions.  The bread inverts the mean-score Jacobian; the meat is
    the mean outer product at ``theta_hat``; the result carries the 1/n
    finite-sample scaling.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    s_hat = np.asarray(score(theta_hat), dtype=float)
    if not np.all(np.isfinite(s_hat)):
        raise SandwichError("per-individual scores are not finite at theta_hat")
    n = s_hat.shape[0]

    def mean_score(theta):
        return np.asarray(score(theta), dtype=float).mean(axis=0)

    jac = numerical_jacobian(mean_score, theta_hat, step=step)
    cond = float(np.linalg.cond(jac))
    if not np.isfinite(cond):
        raise SandwichError("bread Jacobian is not finite")
    # A quasi-separated nuisance fit (e.g. an adherence model with a pure
    # validation cell) leaves an information-free direction in the bread.
    # Invert through a truncated SVD so dead directions are pinned instead of
    # exploding; the raw condition number is reported for diagnostics.
    bread = -np.linalg.pinv(jac, rcond=1e-12)
    if not np.all(np.isfinite(bread)):
        raise SandwichError(f"singular bread (condition number {cond:.3g})")
    meat = s_hat.T @ s_hat / n
    sigma = bread @ meat @ bread.T / n
    sigma = 0.5 * (sigma + sigma.T)
    if psi_index is None:
        sigma_psi = sigma
        psi_names = tuple(theta_names) if theta_names is not None else None
    else:
        idx = np.asarray(psi_index, dtype=int)
        sigma_psi = sigma[np.ix_(idx, idx)]
        psi_names = (
            tuple(np.asarray(theta_names, dtype=object)[idx]) if theta_names is not None else None
        )
    return SandwichResult(
        sigma_theta=sigma,
        sigma_psi=sigma_psi,
        bread_condition=cond,
        theta_names=None if theta_names is None else tuple(theta_names),
        psi_names=psi_names,
    )


def regime_sandwich(
    data: Dataset, plan: EstimationPlan, fit: RegimeFit, *, step: float = 1e-6
) -> SandwichResult:
    """Sandwich covariance for a fitted regime.

    Known, external, and sensitivity adherence parameters are held fixed
    (their blocks are not part of the stacked parameter); when an external
    source supplies a coefficient covariance, the contrast covariance is
    inflated by the delta-method term for that fixed plug-in.
    """
    stacked = build_stacked_score(data, plan, fit)
    result = sandwich(
        stacked.per_individual,
        stacked.theta_hat,
        psi_index=stacked.psi_index,
        step=step,
        theta_names=stacked.parameter_names(),
    )
    source = plan.adherence
    if source is not None and source.kind == "external" and source.covariance is not None:
        extra = _external_adjustment(data, plan, source)
        result = replace(result, sigma_psi=result.sigma_psi + extra)
    return result


def _external_adjustment(data: Dataset, plan: EstimationPlan, source) -> np.ndarray:
    """Delta-method inflation for externally estimated adherence coefficients:
    G Sigma_alpha G^T with G the derivative of the contrast estimates with
    respect to the plugged-in coefficients, by re-estimation."""
    base = plan.psi_estimator(data)
    grads = []
    sigmas = []
    for stage_idx, coef in enumerate(source.coefficients):
        cov = source.covariance[stage_idx] if stage_idx < len(source.covariance) else None
        if cov is None:
            continue
        coef = np.asarray(coef, dtype=float)
        for k in range(coef.shape[0]):
            h = 1e-5 * max(1.0, abs(coef[k]))
            cols = []
            for sign in (+1.0, -1.0):
                shifted = [np.array(c, dtype=float) for c in source.coefficients]
                shifted[stage_idx][k] += sign * h
                perturbed = replace(plan, adherence=replace(source, coefficients=tuple(shifted)))
                cols.append(perturbed.psi_estimator(data))
            grads.append((cols[0] - cols[1]) / (2.0 * h))
        sigmas.append(np.asarray(cov, dtype=float))
    if not grads:
        return np.zeros((base.shape[0], base.shape[0]))
    g = np.column_stack(grads)
    sigma_alpha = _block_diag(sigmas)
    return g @ sigma_alpha @ g.T


def _block_diag(blocks) -> np.ndarray:
    total = sum(b.shape[0] for b in blocks)
    out = np.zeros((total, total))
    at = 0
    for b in blocks:
        out[at : at + b.shape[0], at : at + b.shape[0]] = b
        at += b.shape[0]
    return out


def wald_intervals(psi_hat, sigma_psi, level: float, names=None) -> IntervalSet:
    """Normal-quantile intervals psi_k +/- z * sqrt(Sigma_kk)."""
    if not (0.0 < level < 1.0):
        raise ValueError("confidence level must be in (0, 1)")
    psi_hat = np.asarray(psi_hat, dtype=float)
    diag = np.diag(np.asarray(sigma_psi, dtype=float))
    if np.any(diag < 0):
        raise ValueError("negative variance diagonal")
    z = NormalDist().inv_cdf(0.5 * (1.0 + level))
    half = z * np.sqrt(diag)
    if names is None:
        names = tuple(f"psi[{i}]" for i in range(psi_hat.shape[0]))
    return IntervalSet(
        names=tuple(names),
        lower=psi_hat - half,
        estimate=psi_hat.copy(),
        upper=psi_hat + half,
        level=level,
        method="wald-sandwich",
    )


def _bootstrap_one(args):
    estimator, data, seed_entropy, replicate = args
    child = np.random.SeedSequence(entropy=seed_entropy, spawn_key=(replicate,))
    rng = np.random.default_rng(child)
    idx = rng.integers(0, data.n, size=data.n)
    try:
        return replicate, np.asarray(estimator(data.subset(idx)), dtype=float), None
    except Exception as err:  # noqa: BLE001 - failures are counted, not fatal
        return replicate, None, str(err)


def bootstrap(
    data: Dataset,
    estimator: Callable[[Dataset], np.ndarray],
    n_replicates: int,
    level: float = 0.95,
    seed: int = 0,
    *,
    names=None,
    point_estimates=None,
    jobs: int = 1,
    max_failure_fraction: float = 0.05,
) -> IntervalSet:
    """Percentile bootstrap over trajectories.

    Resamples individuals with replacement and reruns ``estimator`` (which
    should refit the entire pipeline) per replicate.  Replicate streams are
    spawned from ``seed`` by replicate index, so results do not depend on
    ``jobs``.  Failed replicates are dropped and counted; more than
    ``max_failure_fraction`` failing is an error.
    """
    if n_replicates < 2:
        raise ValueError("bootstrap needs at least 2 replicates")
    if not (0.0 < level < 1.0):
        raise ValueError("confidence level must be in (0, 1)")
    if point_estimates is None:
        point_estimates = estimator(data)
    point_estimates = np.asarray(point_estimates, dtype=float)

    tasks = [(estimator, data, seed, b) for b in range(n_replicates)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_bootstrap_one, tasks, chunksize=8))
    else:
        results = [_bootstrap_one(t) for t in tasks]
    results.sort(key=lambda r: r[0])

    draws = [est for _, est, err in results if err is None]
    n_failed = n_replicates - len(draws)
    if n_failed > max_failure_fraction * n_replicates:
        first = next(err for _, _, err in results if err is not None)
        raise BootstrapError(
            f"{n_failed}/{n_replicates} bootstrap replicates failed "
            f"(first failure: {first})"
        )
    stack = np.vstack(draws)
    alpha = 1.0 - level
    lower = np.quantile(stack, alpha / 2.0, axis=0)
    upper = np.quantile(stack, 1.0 - alpha / 2.0, axis=0)
    if names is None:
        names = tuple(f"psi[{i}]" for i in range(point_estimates.shape[0]))
    return IntervalSet(
        names=tuple(names),
        lower=lower,
        estimate=point_estimates,
        upper=upper,
        level=level,
        method="bootstrap-percentile",
        n_failed=n_failed,
    )


def regime_wald_intervals(
    data: Dataset, plan: EstimationPlan, fit: RegimeFit, level: float = 0.95,
    *, step: float = 1e-6
) -> IntervalSet:
    """Convenience wrapper: sandwich covariance then Wald intervals for the
    flattened contrast parameters (stage 1 first)."""
    result = regime_sandwich(data, plan, fit, step=step)
    names = [f"psi{j}.{label}" for j, label in fit.parameter_labels()]
    return wald_intervals(psi_flat(fit), result.sigma_psi, level, names=names)
