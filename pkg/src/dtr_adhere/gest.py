"""Estimation of optimal multi-stage treatment rules from proxy-recorded data.

Backward induction over stages: at each stage a logistic model for treatment
receipt (assignment) and, in the proxy-corrected modes, a logistic model for
the probability the treatment was actually taken given the recorded proxy
(adherence) are fitted first; the contrast parameters then solve a linear
estimating equation paired with a least-squares treatment-free regression,
iterated to joint convergence.  Pseudo outcomes carry each solved stage's
contribution backward.

Four modes are supported:

* ``standard-actual``        -- estimating equations on the actual treatments;
* ``standard-naive-proxy``   -- the recorded proxy treated as if it were true;
* ``modified-prescribed``    -- correction for prescribed-treatment proxies;
* ``modified-reported``      -- the same correction for reported treatments.

The corrected modes residualize the proxy against its own assignment model and
weight contrasts by the adherence probability, so the solved parameters target
the effect of treatment actually taken rather than of its proxy.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .glm import GlmFit, NonConvergenceError, RankDeficiencyError, expit, fit_logistic
from .model import (
    Dataset,
    DataError,
    DesignError,
    FeatureSpec,
    MODE_USE_ACTUAL,
    MODE_USE_EXPECTED,
    MODE_USE_PROXY,
    Trajectory,
    build_design_matrix,
    build_design_row,
    parse_feature_spec,
)

MODES = (
    "standard-actual",
    "standard-naive-proxy",
    "modified-prescribed",
    "modified-reported",
)

CONDITION_LIMIT = 1e12
POSITIVITY_EPS = 1e-12


class EstimationError(RuntimeError):
    """Stage-level estimation failure; carries the 1-based stage index."""

    def __init__(self, message: str, stage: Optional[int] = None):
        if stage is not None:
            message = f"stage {stage}: {message}"
        super().__init__(message)
        self.stage = stage


class SingularSystemError(EstimationError):
    """The stage linear system is singular or numerically unusable."""


# ---------------------------------------------------------------------------
# Specifications


@dataclass(frozen=True)
class StageModelSpec:
    """Feature specs for the four per-stage models plus the lambda choice.

    The contrast and treatment-free specs may reference past treatments only;
    the contrast is multiplied by the current treatment externally.  The
    adherence spec conditions on the recorded proxy, so it must reference the
    current stage's treatment.
    """

    contrast: FeatureSpec
    treatment_free: FeatureSpec
    assignment: FeatureSpec
    adherence: Optional[FeatureSpec] = None
    lambda_choice: str = "gradient"

    @classmethod
    def from_strings(cls, contrast, treatment_free, assignment, adherence=None,
                     lambda_choice="gradient"):
        return cls(
            contrast=parse_feature_spec(contrast),
            treatment_free=parse_feature_spec(treatment_free),
            assignment=parse_feature_spec(assignment),
            adherence=None if adherence is None else parse_feature_spec(adherence),
            lambda_choice=lambda_choice,
        )


def validate_stage_models(specs: Sequence[StageModelSpec], n_stages: int) -> None:
    if len(specs) != n_stages:
        raise DesignError(
            f"{len(specs)} stage model specs for a {n_stages}-stage dataset"
        )
    for j, spec in enumerate(specs, start=1):
        if spec.lambda_choice != "gradient":
            raise DesignError(f"unsupported lambda choice '{spec.lambda_choice}'")
        spec.contrast.validate_stage(j, allow_current_treatment=False)
        spec.treatment_free.validate_stage(j, allow_current_treatment=False)
        # An assignment model may condition on the current stage's proxy
        # (e.g. the prescription precedes the treatment actually taken).
        spec.assignment.validate_stage(j, allow_current_treatment=True)
        if spec.adherence is not None:
            spec.adherence.validate_stage(j, allow_current_treatment=True)


@dataclass(frozen=True)
class AdherenceSource:
    """How the probability of actual treatment given history and proxy is obtained.

    ``fitted`` estimates it by logistic regression on validation rows;
    ``known`` supplies it outright, either as a vectorized probability function
    ``f(stage, cov, proxy)`` (``cov(name, stage)`` returns a column) or as
    fixed coefficients for the stage adherence specs; ``external`` provides
    fixed coefficients from outside the sample, optionally with their
    covariance for variance adjustment; ``sensitivity`` is a fixed-coefficient
    grid point carrying no uncertainty.
    """

    kind: str
    probability: Optional[Callable] = None
    coefficients: Optional[tuple] = None
    covariance: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in ("known", "fitted", "external", "sensitivity"):
            raise ValueError(f"unknown adherence source kind '{self.kind}'")
        if self.kind == "fitted":
            if self.probability is not None or self.coefficients is not None:
                raise ValueError("fitted adherence carries no fixed values")
        elif self.kind == "known":
            if (self.probability is None) == (self.coefficients is None):
                raise ValueError(
                    "known adherence needs a probability function or coefficients"
                )
        elif self.coefficients is None:
            raise ValueError(f"{self.kind} adherence requires coefficients")

    @classmethod
    def fitted(cls):
        return cls(kind="fitted")

    @classmethod
    def known(cls, probability=None, coefficients=None):
        return cls(
            kind="known",
            probability=probability,
            coefficients=_coef_tuple(coefficients),
        )

    @classmethod
    def external(cls, coefficients, covariance=None):
        return cls(
            kind="external",
            coefficients=_coef_tuple(coefficients),
            covariance=None
            if covariance is None
            else tuple(None if c is None else np.asarray(c, dtype=float) for c in covariance),
        )

    @classmethod
    def sensitivity(cls, coefficients):
        return cls(kind="sensitivity", coefficients=_coef_tuple(coefficients))


def _coef_tuple(coefficients):
    if coefficients is None:
        return None
    return tuple(np.asarray(c, dtype=float) for c in coefficients)


# ---------------------------------------------------------------------------
# Pseudo outcomes


def pseudo_outcome_standard(v_next, a, a_opt, contrast_value):
    """Next-stage pseudo outcome plus the regret of the taken treatment."""
    return v_next + (np.asarray(a_opt, dtype=float) - a) * contrast_value


def pseudo_outcome_modified(v_next, a_opt, pi_star, contrast_star):
    """Proxy-corrected pseudo outcome: the adherence probability stands in
    for the unobserved treatment indicator."""
    return v_next + (np.asarray(a_opt, dtype=float) - pi_star) * contrast_star


def pseudo_outcome_exact(v_next, pi_prev, contrast_when_treated, contrast_when_untreated):
    """Pseudo-outcome increment averaging the optimal-rule payoff over the
    unobserved lagged treatment.

    Adds ``pi_prev * I{C(1)>0} C(1) + (1 - pi_prev) * I{C(0)>0} C(0)`` where
    ``C(a)`` is the contrast with the lagged treatment pinned to ``a``.
    """
    c1 = np.asarray(contrast_when_treated, dtype=float)
    c0 = np.asarray(contrast_when_untreated, dtype=float)
    gain1 = np.where(c1 > 0.0, c1, 0.0)
    gain0 = np.where(c0 > 0.0, c0, 0.0)
    return v_next + pi_prev * gain1 + (1.0 - np.asarray(pi_prev, dtype=float)) * gain0


# ---------------------------------------------------------------------------
# Stage-level solves


def solve_stage(lam, treatment, assignment_prob, v_plus_theta, *,
                adherence_prob=None, contrast_design=None):
    """Solve the linear stage estimating equation for the contrast parameters.

    With ``w`` the adherence probability (or the treatment itself in the
    uncorrected modes), ``e = treatment - assignment_prob``, and ``c_i`` the
    contrast design row (the gradient ``lam_i`` itself unless given), solves
    ``M psi = b`` where ``M = sum_i lam_i e_i w_i c_i^T`` and
    ``b = sum_i lam_i e_i (v_plus_theta)_i``.  Rescaling ``lam`` rescales the
    whole system and leaves the solution unchanged.
    """
    lam = np.asarray(lam, dtype=float)
    if lam.ndim == 1:
        lam = lam[:, None]
    contrast = lam if contrast_design is None else np.asarray(contrast_design, dtype=float)
    t = np.asarray(treatment, dtype=float)
    e = t - np.asarray(assignment_prob, dtype=float)
    w = t if adherence_prob is None else np.asarray(adherence_prob, dtype=float)
    m = (lam * (e * w)[:, None]).T @ contrast
    b = lam.T @ (e * np.asarray(v_plus_theta, dtype=float))
    cond = np.linalg.cond(m)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise SingularSystemError(
            f"stage system condition number {cond:.3g} exceeds {CONDITION_LIMIT:.0e}"
        )
    return np.linalg.solve(m, b)


def _fit_stage(lam, tf_design, treatment, assignment_prob, weight, v_next, *,
               stage: int, max_outer: int = 50, tol: float = 1e-10):
    """Alternate the contrast solve with the treatment-free regression until
    the joint parameter step falls below ``tol``."""
    e = np.asarray(treatment, dtype=float) - assignment_prob
    ew = e * weight
    m = (lam * ew[:, None]).T @ lam
    cond = float(np.linalg.cond(m))
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise SingularSystemError(
            f"stage system condition number {cond:.3g} exceeds {CONDITION_LIMIT:.0e}",
            stage=stage,
        )
    q, r = np.linalg.qr(tf_design)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or np.min(diag) <= 1e-12 * max(np.max(diag), 1.0):
        raise RankDeficiencyError(f"treatment-free design at stage {stage} is rank deficient")

    beta = np.zeros(tf_design.shape[1])
    psi = np.zeros(lam.shape[1])
    for outer in range(1, max_outer + 1):
        b = lam.T @ (e * (v_next - tf_design @ beta))
        psi_new = np.linalg.solve(m, b)
        contrast = lam @ psi_new
        beta_new = np.linalg.solve(r, q.T @ (v_next - weight * contrast))
        step = max(
            float(np.max(np.abs(psi_new - psi))),
            float(np.max(np.abs(beta_new - beta))),
        )
        psi, beta = psi_new, beta_new
        if step < tol:
            return psi, beta, outer, cond
    # The alternation is a block Gauss-Seidel pass over one joint linear
    # system; when the blocks couple strongly (e.g. a deliberately wrong
    # assignment model) it can cycle, so solve the stacked system directly.
    p_tf, p_psi = tf_design.shape[1], lam.shape[1]
    joint = np.empty((p_tf + p_psi, p_tf + p_psi))
    joint[:p_tf, :p_tf] = tf_design.T @ tf_design
    joint[:p_tf, p_tf:] = tf_design.T @ (weight[:, None] * lam)
    joint[p_tf:, :p_tf] = (lam * e[:, None]).T @ tf_design
    joint[p_tf:, p_tf:] = m
    rhs = np.concatenate([tf_design.T @ v_next, lam.T @ (e * v_next)])
    joint_cond = float(np.linalg.cond(joint))
    if not np.isfinite(joint_cond) or joint_cond > CONDITION_LIMIT:
        raise EstimationError(
            "contrast/treatment-free equations are jointly singular "
            f"(condition {joint_cond:.3g})",
            stage=stage,
        )
    solution = np.linalg.solve(joint, rhs)
    return solution[p_tf:], solution[:p_tf], max_outer + 1, cond


# ---------------------------------------------------------------------------
# Adherence handling


def fit_adherence(data: Dataset, stage: int, spec: FeatureSpec, proxy_kind: str,
                  *, expected: Optional[Mapping[int, np.ndarray]] = None) -> GlmFit:
    """Fit the adherence model at one stage on the validation rows only:
    a logistic regression of the actual treatment on history and proxy."""
    mask = data.validation[:, stage - 1]
    n_val = int(mask.sum())
    if n_val == 0:
        raise DataError(f"no validation rows at stage {stage}")
    design = build_design_matrix(
        spec, data, stage, MODE_USE_PROXY, proxy_kind=proxy_kind, expected=expected
    )
    actual = data.actual(stage)
    return fit_logistic(design[mask], actual[mask])


@dataclass(frozen=True)
class _AdherenceRep:
    """Resolved per-stage adherence model, evaluable on new histories."""

    kind: str  # "coef" | "function"
    spec: Optional[FeatureSpec] = None
    coefficients: Optional[np.ndarray] = None
    probability: Optional[Callable] = None
    fit: Optional[GlmFit] = None

    def column(self, data: Dataset, stage: int, proxy_kind: str,
               expected: Optional[Mapping[int, np.ndarray]] = None) -> np.ndarray:
        if self.kind == "function":
            def cov(name, st):
                return data.covariate(name, st)

            proxy = data.proxy(stage, proxy_kind)
            probs = np.asarray(self.probability(stage, cov, proxy), dtype=float)
            if probs.shape != (data.n,) or np.any((probs < 0) | (probs > 1)):
                raise DesignError("adherence probability function returned invalid values")
            return probs
        design = build_design_matrix(
            self.spec, data, stage, MODE_USE_PROXY, proxy_kind=proxy_kind, expected=expected
        )
        return expit(design @ self.coefficients)

    def row_value(self, traj: Trajectory, stage: int, proxy_kind: Optional[str],
                  expected: Optional[Mapping[int, float]] = None) -> float:
        if self.kind == "function":
            record = traj.stages[stage - 1]
            if proxy_kind == "reported" or (proxy_kind is None and record.prescribed is None):
                proxy = record.reported
            else:
                proxy = record.prescribed
            if proxy is None:
                raise DesignError(f"proxy treatment missing at stage {stage}")

            def cov(name, st):
                return float(traj.stages[st - 1].covariates[name])

            return float(self.probability(stage, cov, np.asarray(float(proxy))))
        row = build_design_row(
            self.spec, traj, stage, MODE_USE_PROXY, proxy_kind=proxy_kind, expected=expected
        )
        return float(expit(float(row @ self.coefficients)))


# ---------------------------------------------------------------------------
# The estimation plan and pipeline


@dataclass(frozen=True)
class EstimationPlan:
    """Bundle of everything needed to fit a regime on a dataset."""

    specs: tuple
    mode: str
    adherence: Optional[AdherenceSource] = None
    exact_pseudo_outcomes: bool = False
    proxy_kind: Optional[str] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown estimation mode '{self.mode}'")
        object.__setattr__(self, "specs", tuple(self.specs))

    @property
    def is_modified(self) -> bool:
        return self.mode.startswith("modified")

    def resolve_proxy_kind(self, data: Dataset) -> Optional[str]:
        if self.mode == "modified-prescribed":
            return "prescribed"
        if self.mode == "modified-reported":
            return "reported"
        if self.proxy_kind is not None:
            return self.proxy_kind
        return data.default_proxy_kind()

    def estimate(self, data: Dataset) -> "RegimeFit":
        return _Pipeline(self, data).run()

    def psi_estimator(self, data: Dataset) -> np.ndarray:
        """Flattened contrast estimates, stage 1 first; used by the bootstrap."""
        return psi_flat(self.estimate(data))


@dataclass(frozen=True)
class RegimeFit:
    """Fitted regime: contrast estimates with nuisances and diagnostics."""

    mode: str
    psi: tuple
    nuisance: tuple  # per stage: {"alpha": array|None, "beta": array, "gamma": array}
    pseudo_outcomes: np.ndarray  # (n, K); column j-1 holds the stage-j pseudo outcome
    diagnostics: dict
    specs: tuple
    proxy_kind: Optional[str]
    adherence_reps: Optional[tuple]
    exact_pseudo_outcomes: bool
    adherence_kind: Optional[str]

    @property
    def n_stages(self) -> int:
        return len(self.psi)

    def parameter_labels(self) -> list:
        return [
            (j, label)
            for j, spec in enumerate(self.specs, start=1)
            for label in spec.contrast.term_labels()
        ]


def psi_flat(fit: RegimeFit) -> np.ndarray:
    return np.concatenate(fit.psi)


def estimate_regime(
    data: Dataset,
    specs: Sequence[StageModelSpec],
    mode: str,
    adherence: Optional[AdherenceSource] = None,
    *,
    exact_pseudo_outcomes: bool = False,
    proxy_kind: Optional[str] = None,
) -> RegimeFit:
    """Fit all stage contrasts by backward induction.  See module docstring."""
    plan = EstimationPlan(
        specs=tuple(specs),
        mode=mode,
        adherence=adherence,
        exact_pseudo_outcomes=exact_pseudo_outcomes,
        proxy_kind=proxy_kind,
    )
    return plan.estimate(data)


class _Pipeline:
    def __init__(self, plan: EstimationPlan, data: Dataset):
        self.plan = plan
        self.data = data
        self.k = data.n_stages
        validate_stage_models(plan.specs, self.k)
        self.proxy_kind = plan.resolve_proxy_kind(data)
        self.design_mode = {
            "standard-actual": MODE_USE_ACTUAL,
            "standard-naive-proxy": MODE_USE_PROXY,
            "modified-prescribed": MODE_USE_EXPECTED,
            "modified-reported": MODE_USE_EXPECTED,
        }[plan.mode]
        self._check_fields()

    def _check_fields(self):
        plan, data = self.plan, self.data
        if plan.mode == "standard-actual":
            for j in range(1, self.k + 1):
                col = data.actual(j)
                if col is None or np.any(np.isnan(col)):
                    raise DataError(
                        f"mode standard-actual needs the actual treatment at every "
                        f"stage; missing at stage {j}"
                    )
        else:
            if self.proxy_kind is None:
                raise DataError("no proxy treatment column available for this mode")
            for j in range(1, self.k + 1):
                col = data.proxy(j, self.proxy_kind)
                if col is None or np.any(np.isnan(col)):
                    raise DataError(
                        f"{self.proxy_kind} treatment missing at stage {j}"
                    )
        if plan.is_modified and plan.adherence is None:
            raise DataError("modified modes require an AdherenceSource")

    # -- responses ------------------------------------------------------------

    def response(self, stage: int) -> np.ndarray:
        if self.plan.mode == "standard-actual":
            return self.data.actual(stage)
        return self.data.proxy(stage, self.proxy_kind)

    # -- adherence ------------------------------------------------------------

    def resolve_adherence(self):
        """Per-stage adherence reps and probability columns, built in stage
        order so expected-treatment references to earlier stages resolve."""
        source = self.plan.adherence
        reps, columns = [], {}
        for j in range(1, self.k + 1):
            spec = self.plan.specs[j - 1].adherence
            if source.kind == "fitted":
                if spec is None:
                    raise DesignError(f"no adherence spec at stage {j} for fitted source")
                if not spec.treatment_stages() or j not in spec.treatment_stages():
                    raise DesignError(
                        f"adherence spec at stage {j} must include the stage-{j} proxy"
                    )
                fit = fit_adherence(
                    self.data, j, spec, self.proxy_kind, expected=dict(columns)
                )
                rep = _AdherenceRep(
                    kind="coef", spec=spec, coefficients=fit.coefficients, fit=fit
                )
            elif source.kind == "known" and source.probability is not None:
                rep = _AdherenceRep(kind="function", probability=source.probability)
            else:
                coefs = source.coefficients
                if coefs is None or len(coefs) < j:
                    raise DataError(f"adherence coefficients missing for stage {j}")
                if spec is None:
                    raise DesignError(f"no adherence spec at stage {j}")
                vec = np.asarray(coefs[j - 1], dtype=float)
                if vec.shape != (len(spec.terms),):
                    raise DataError(
                        f"adherence coefficient vector at stage {j} has length "
                        f"{vec.shape[0]}, spec has {len(spec.terms)} terms"
                    )
                rep = _AdherenceRep(kind="coef", spec=spec, coefficients=vec)
            reps.append(rep)
            columns[j] = rep.column(
                self.data, j, self.proxy_kind, expected=dict(columns)
            )
        return tuple(reps), columns

    # -- the run ---------------------------------------------------------------

    def run(self) -> RegimeFit:
        data, plan, k = self.data, self.plan, self.k
        n = data.n

        expected = None
        reps = None
        pi_star = {}
        if plan.is_modified:
            reps, pi_star = self.resolve_adherence()
            expected = pi_star

        assign_mode = MODE_USE_ACTUAL if plan.mode == "standard-actual" else MODE_USE_PROXY
        gammas, p_cols, positivity = [], [], []
        for j in range(1, k + 1):
            design = build_design_matrix(
                plan.specs[j - 1].assignment, data, j, assign_mode,
                proxy_kind=self.proxy_kind, expected=expected,
            )
            try:
                gam = fit_logistic(design, self.response(j))
            except (NonConvergenceError, RankDeficiencyError) as err:
                raise EstimationError(f"assignment model failed: {err}", stage=j) from err
            p = expit(design @ gam.coefficients)
            n_extreme = int(np.sum((p < POSITIVITY_EPS) | (p > 1.0 - POSITIVITY_EPS)))
            if n_extreme:
                warnings.warn(
                    f"stage {j}: {n_extreme} fitted assignment probabilities are "
                    "numerically 0 or 1 (positivity violation)",
                    stacklevel=2,
                )
            positivity.append(n_extreme)
            gammas.append(gam)
            p_cols.append(p)

        psi, betas = [None] * k, [None] * k
        outer_iters, conds = [0] * k, [0.0] * k
        pseudo = np.empty((n, k))
        v = data.outcome.copy()
        for j in range(k, 0, -1):
            spec = plan.specs[j - 1]
            lam = build_design_matrix(
                spec.contrast, data, j, self.design_mode,
                proxy_kind=self.proxy_kind, expected=expected,
            )
            tf = build_design_matrix(
                spec.treatment_free, data, j, self.design_mode,
                proxy_kind=self.proxy_kind, expected=expected,
            )
            resp = self.response(j)
            weight = pi_star[j] if plan.is_modified else resp
            try:
                psi_j, beta_j, iters, cond = _fit_stage(
                    lam, tf, resp, p_cols[j - 1], weight, v, stage=j
                )
            except RankDeficiencyError as err:
                raise EstimationError(str(err), stage=j) from err
            psi[j - 1], betas[j - 1] = psi_j, beta_j
            outer_iters[j - 1], conds[j - 1] = iters, cond

            contrast = lam @ psi_j
            v = self._advance_pseudo(j, spec, psi_j, contrast, resp, weight,
                                     v, expected, pi_star)
            if not np.all(np.isfinite(v)):
                raise EstimationError("pseudo outcomes are not finite", stage=j)
            pseudo[:, j - 1] = v

        nuisance = tuple(
            {
                "alpha": None if reps is None or reps[j].fit is None else reps[j].coefficients,
                "beta": betas[j],
                "gamma": gammas[j].coefficients,
            }
            for j in range(k)
        )
        diagnostics = {
            "stage_condition": conds,
            "outer_iterations": outer_iters,
            "positivity_violations": positivity,
            "assignment_iterations": [g.iterations for g in gammas],
        }
        return RegimeFit(
            mode=plan.mode,
            psi=tuple(psi),
            nuisance=nuisance,
            pseudo_outcomes=pseudo,
            diagnostics=diagnostics,
            specs=plan.specs,
            proxy_kind=self.proxy_kind,
            adherence_reps=reps,
            exact_pseudo_outcomes=plan.exact_pseudo_outcomes,
            adherence_kind=None if plan.adherence is None else plan.adherence.kind,
        )

    def _advance_pseudo(self, j, spec, psi_j, contrast, resp, weight, v,
                        expected, pi_star):
        a_opt = contrast > 0.0
        if not self.plan.is_modified:
            return pseudo_outcome_standard(v, resp, a_opt, contrast)
        lagged = spec.contrast.treatment_stages()
        if self.plan.exact_pseudo_outcomes and lagged:
            if len(lagged) > 1:
                raise EstimationError(
                    "exact pseudo-outcome correction supports exactly one lagged "
                    f"treatment in the contrast, found stages {sorted(lagged)}",
                    stage=j,
                )
            lag = next(iter(lagged))
            c1 = build_design_matrix(
                spec.contrast, self.data, j, self.design_mode,
                proxy_kind=self.proxy_kind, expected=expected,
                treatment_override={lag: 1.0},
            ) @ psi_j
            c0 = build_design_matrix(
                spec.contrast, self.data, j, self.design_mode,
                proxy_kind=self.proxy_kind, expected=expected,
                treatment_override={lag: 0.0},
            ) @ psi_j
            # The expected optimal payoff replaces a_opt * contrast; the
            # adherence-weighted contrast is still subtracted as usual.
            return pseudo_outcome_exact(v, pi_star[lag], c1, c0) - weight * contrast
        return pseudo_outcome_modified(v, a_opt, weight, contrast)


# ---------------------------------------------------------------------------
# Recommendations


def _expected_for_history(fit: RegimeFit, history: Trajectory, stages) -> dict:
    out = {}
    for lag in sorted(stages):
        rep = fit.adherence_reps[lag - 1]
        out[lag] = rep.row_value(history, lag, fit.proxy_kind, expected=dict(out))
    return out


def recommend(fit: RegimeFit, history: Trajectory, stage: int) -> int:
    """Treatment recommendation at a stage: 1 iff the estimated contrast is
    strictly positive given the (possibly partial) history."""
    if not (1 <= stage <= fit.n_stages):
        raise DesignError(f"stage {stage} out of range (1..{fit.n_stages})")
    spec = fit.specs[stage - 1].contrast
    mode = {
        "standard-actual": MODE_USE_ACTUAL,
        "standard-naive-proxy": MODE_USE_PROXY,
        "modified-prescribed": MODE_USE_EXPECTED,
        "modified-reported": MODE_USE_EXPECTED,
    }[fit.mode]
    expected = None
    if mode == MODE_USE_EXPECTED and spec.treatment_stages():
        expected = _expected_for_history(fit, history, spec.treatment_stages())
    row = build_design_row(
        spec, history, stage, mode, proxy_kind=fit.proxy_kind, expected=expected
    )
    return int(row @ fit.psi[stage - 1] > 0.0)


def recommendations_matrix(fit: RegimeFit, data: Dataset) -> np.ndarray:
    """(n, K) matrix of rule outputs for every individual and stage."""
    mode = {
        "standard-actual": MODE_USE_ACTUAL,
        "standard-naive-proxy": MODE_USE_PROXY,
        "modified-prescribed": MODE_USE_EXPECTED,
        "modified-reported": MODE_USE_EXPECTED,
    }[fit.mode]
    expected = None
    if mode == MODE_USE_EXPECTED:
        expected = {}
        for j in range(1, data.n_stages + 1):
            expected[j] = fit.adherence_reps[j - 1].column(
                data, j, fit.proxy_kind, expected=dict(expected)
            )
    out = np.empty((data.n, data.n_stages), dtype=int)
    for j in range(1, data.n_stages + 1):
        design = build_design_matrix(
            fit.specs[j - 1].contrast, data, j, mode,
            proxy_kind=fit.proxy_kind, expected=expected,
        )
        out[:, j - 1] = (design @ fit.psi[j - 1] > 0.0).astype(int)
    return out


# ---------------------------------------------------------------------------
# Sensitivity sweeps


@dataclass(frozen=True)
class SweepPoint:
    coefficients: tuple
    fit: Optional[RegimeFit]
    error: Optional[str]


def sensitivity_sweep(
    data: Dataset,
    specs: Sequence[StageModelSpec],
    grid: Sequence,
    mode: str,
    *,
    exact_pseudo_outcomes: bool = False,
    proxy_kind: Optional[str] = None,
) -> list:
    """Re-estimate once per grid point with adherence pinned to the given
    coefficients (no adherence uncertainty).  A flat vector is applied to
    every stage; a sequence of vectors maps stage by stage.  Failed points
    are collected, not fatal.
    """
    if not grid:
        raise ValueError("sensitivity grid is empty")
    k = data.n_stages
    points = []
    for entry in grid:
        arr = np.asarray(entry, dtype=float)
        per_stage = tuple(arr for _ in range(k)) if arr.ndim == 1 else tuple(arr)
        source = AdherenceSource.sensitivity(per_stage)
        plan = EstimationPlan(
            specs=tuple(specs),
            mode=mode,
            adherence=source,
            exact_pseudo_outcomes=exact_pseudo_outcomes,
            proxy_kind=proxy_kind,
        )
        try:
            fit = plan.estimate(data)
            points.append(SweepPoint(coefficients=per_stage, fit=fit, error=None))
        except Exception as err:  # noqa: BLE001 - per-point failures are data
            points.append(SweepPoint(coefficients=per_stage, fit=None, error=str(err)))
    return points


# ---------------------------------------------------------------------------
# Stacked per-individual scores (for sandwich variance estimation)


@dataclass(frozen=True)
class ThetaBlock:
    stage: int
    kind: str  # "treatment_free" | "adherence" | "assignment" | "contrast"
    start: int
    size: int


class StackedScore:
    """Per-individual stacked estimating-function contributions as a function
    of the full parameter vector.

    Parameters are packed stage K down to stage 1; within a stage the order is
    treatment-free, adherence (only when fitted from validation rows),
    assignment, contrast.  The forward pass rebuilds adherence and assignment
    probabilities, the substituted design matrices, and all pseudo outcomes
    from the supplied parameters, so derivatives propagate nuisance
    uncertainty into the contrast blocks.
    """

    def __init__(self, data: Dataset, plan: EstimationPlan, fit: RegimeFit):
        self.data = data
        self.plan = plan
        self.fit = fit
        self.k = data.n_stages
        self.proxy_kind = fit.proxy_kind
        self.design_mode = {
            "standard-actual": MODE_USE_ACTUAL,
            "standard-naive-proxy": MODE_USE_PROXY,
            "modified-prescribed": MODE_USE_EXPECTED,
            "modified-reported": MODE_USE_EXPECTED,
        }[plan.mode]
        self.adherence_fitted = plan.is_modified and plan.adherence.kind == "fitted"

        if plan.mode == "standard-actual":
            self.resp = [data.actual(j) for j in range(1, self.k + 1)]
        else:
            self.resp = [data.proxy(j, self.proxy_kind) for j in range(1, self.k + 1)]

        # Fixed adherence columns (known/external/sensitivity sources do not
        # contribute parameters).
        self.fixed_pi = None
        if plan.is_modified and not self.adherence_fitted:
            self.fixed_pi = {}
            for j in range(1, self.k + 1):
                self.fixed_pi[j] = fit.adherence_reps[j - 1].column(
                    data, j, self.proxy_kind, expected=dict(self.fixed_pi)
                )

        blocks, start = [], 0
        for j in range(self.k, 0, -1):
            spec = plan.specs[j - 1]
            for kind, size in (
                ("treatment_free", len(spec.treatment_free.terms)),
                ("adherence", len(spec.adherence.terms) if self.adherence_fitted else 0),
                ("assignment", len(spec.assignment.terms)),
                ("contrast", len(spec.contrast.terms)),
            ):
                if size:
                    blocks.append(ThetaBlock(stage=j, kind=kind, start=start, size=size))
                    start += size
        self.blocks = tuple(blocks)
        self.size = start
        self.theta_hat = self._pack(fit)

    def _pack(self, fit: RegimeFit) -> np.ndarray:
        theta = np.empty(self.size)
        for block in self.blocks:
            j = block.stage
            if block.kind == "treatment_free":
                vals = fit.nuisance[j - 1]["beta"]
            elif block.kind == "adherence":
                vals = fit.nuisance[j - 1]["alpha"]
            elif block.kind == "assignment":
                vals = fit.nuisance[j - 1]["gamma"]
            else:
                vals = fit.psi[j - 1]
            theta[block.start : block.start + block.size] = vals
        return theta

    def _unpack(self, theta: np.ndarray) -> dict:
        out = {}
        for block in self.blocks:
            out[(block.stage, block.kind)] = theta[block.start : block.start + block.size]
        return out

    @property
    def psi_index(self) -> np.ndarray:
        """Indices of contrast parameters in theta, ordered stage 1..K."""
        idx = []
        for j in range(1, self.k + 1):
            for block in self.blocks:
                if block.stage == j and block.kind == "contrast":
                    idx.extend(range(block.start, block.start + block.size))
        return np.asarray(idx, dtype=int)

    def parameter_names(self) -> list:
        prefix = {
            "treatment_free": "beta",
            "adherence": "alpha",
            "assignment": "gamma",
            "contrast": "psi",
        }
        spec_of = {
            "treatment_free": lambda s: s.treatment_free,
            "adherence": lambda s: s.adherence,
            "assignment": lambda s: s.assignment,
            "contrast": lambda s: s.contrast,
        }
        names = [""] * self.size
        for block in self.blocks:
            labels = spec_of[block.kind](self.plan.specs[block.stage - 1]).term_labels()
            for i, label in enumerate(labels):
                names[block.start + i] = f"{prefix[block.kind]}{block.stage}.{label}"
        return names

    def per_individual(self, theta: np.ndarray) -> np.ndarray:
        params = self._unpack(np.asarray(theta, dtype=float))
        data, plan, k = self.data, self.plan, self.k
        n = data.n

        expected = None
        pi_star = {}
        if plan.is_modified:
            if self.adherence_fitted:
                for j in range(1, k + 1):
                    spec = plan.specs[j - 1].adherence
                    design = build_design_matrix(
                        spec, data, j, MODE_USE_PROXY,
                        proxy_kind=self.proxy_kind, expected=dict(pi_star),
                    )
                    pi_star[j] = expit(design @ params[(j, "adherence")])
            else:
                pi_star = dict(self.fixed_pi)
            expected = pi_star

        out = np.zeros((n, self.size))
        p_cols, assign_designs = {}, {}
        assign_mode = MODE_USE_ACTUAL if plan.mode == "standard-actual" else MODE_USE_PROXY
        for j in range(1, k + 1):
            design = build_design_matrix(
                plan.specs[j - 1].assignment, data, j, assign_mode,
                proxy_kind=self.proxy_kind, expected=expected,
            )
            assign_designs[j] = design
            p_cols[j] = expit(design @ params[(j, "assignment")])

        v = data.outcome.copy()
        for j in range(k, 0, -1):
            spec = plan.specs[j - 1]
            psi_j = params[(j, "contrast")]
            lam = build_design_matrix(
                spec.contrast, data, j, self.design_mode,
                proxy_kind=self.proxy_kind, expected=expected,
            )
            tf = build_design_matrix(
                spec.treatment_free, data, j, self.design_mode,
                proxy_kind=self.proxy_kind, expected=expected,
            )
            resp = self.resp[j - 1]
            weight = pi_star[j] if plan.is_modified else resp
            contrast = lam @ psi_j
            resid = v - weight * contrast - tf @ params[(j, "treatment_free")]
            e = resp - p_cols[j]

            for block in self.blocks:
                if block.stage != j:
                    continue
                sl = slice(block.start, block.start + block.size)
                if block.kind == "treatment_free":
                    out[:, sl] = tf * resid[:, None]
                elif block.kind == "adherence":
                    mask = data.validation[:, j - 1].astype(float)
                    design = build_design_matrix(
                        spec.adherence, data, j, MODE_USE_PROXY,
                        proxy_kind=self.proxy_kind,
                        expected=dict(pi_star) if expected else None,
                    )
                    actual = np.where(data.validation[:, j - 1], data.actual(j), 0.0)
                    out[:, sl] = design * (mask * (actual - pi_star[j]))[:, None]
                elif block.kind == "assignment":
                    out[:, sl] = assign_designs[j] * e[:, None]
                else:
                    out[:, sl] = lam * (e * resid)[:, None]

            # advance the pseudo outcome with the same rules as estimation
            a_opt = contrast > 0.0
            if not plan.is_modified:
                v = pseudo_outcome_standard(v, resp, a_opt, contrast)
            else:
                lagged = spec.contrast.treatment_stages()
                if plan.exact_pseudo_outcomes and lagged and len(lagged) == 1:
                    lag = next(iter(lagged))
                    c1 = build_design_matrix(
                        spec.contrast, data, j, self.design_mode,
                        proxy_kind=self.proxy_kind, expected=expected,
                        treatment_override={lag: 1.0},
                    ) @ psi_j
                    c0 = build_design_matrix(
                        spec.contrast, data, j, self.design_mode,
                        proxy_kind=self.proxy_kind, expected=expected,
                        treatment_override={lag: 0.0},
                    ) @ psi_j
                    v = pseudo_outcome_exact(v, pi_star[lag], c1, c0) - weight * contrast
                else:
                    v = pseudo_outcome_modified(v, a_opt, weight, contrast)
        return out

    def mean(self, theta: np.ndarray) -> np.ndarray:
        return self.per_individual(theta).mean(axis=0)


def build_stacked_score(data: Dataset, plan: EstimationPlan, fit: RegimeFit) -> StackedScore:
    return StackedScore(data, plan, fit)


def plan_for_fit(fit: RegimeFit, adherence: Optional[AdherenceSource]) -> EstimationPlan:
    return EstimationPlan(
        specs=fit.specs,
        mode=fit.mode,
        adherence=adherence,
        exact_pseudo_outcomes=fit.exact_pseudo_outcomes,
        proxy_kind=fit.proxy_kind,
    )
