"""Synthetic two-stage scenarios and the replication engine.

Each generator composes the outcome in regret form,

    Y = treatment_free(history) + noise - sum_j [I(C_j > 0) - A_j] C_j,

so the contrast coefficients used in generation are exactly the parameters a
correct analysis should recover at both stages (subtracting each stage's
realized regret leaves the optimal-continuation value, whatever the later
contrasts do to earlier histories).

Scenarios:

* ``s1`` -- normal tailoring covariates, prescription proxies with
  covariate-dependent nonadherence, stage-2 contrast tied to the stage-1
  treatment by a configurable coefficient;
* ``s2`` -- s1 with that coefficient pinned to zero, for varying the
  validation fraction;
* ``s3`` -- shifted assignment models and a direct stage-1 treatment effect
  in the outcome, for interval-coverage studies;
* ``s4`` -- three-point covariates with reported (post-treatment) proxies.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .gest import AdherenceSource, EstimationPlan, StageModelSpec, psi_flat
from .glm import expit
from .inference import regime_wald_intervals
from .model import Dataset

SCENARIOS = ("s1", "s2", "s3", "s4")
ESTIMATORS = ("modified-known", "modified-fitted", "naive-proxy", "standard-actual")

# Nonadherence mechanism shared by s1/s2/s3: the chance the treatment was
# actually taken, given the stage covariate and the prescription.
PRESCRIBED_ADHERENCE_COEF = (-4.6, -0.83, 7.5)


class ReplicationError(RuntimeError):
    """More replicates failed than the tolerated fraction."""


# ---------------------------------------------------------------------------
# Generators


def _regret_outcome(treatment_free, noise, contrasts, treatments):
    y = treatment_free + noise
    for c, a in zip(contrasts, treatments):
        y = y - ((c > 0.0).astype(float) - a) * c
    return y


def _validation_flags(n: int, fraction: float, rng: np.random.Generator, stages: int) -> np.ndarray:
    if not (0.0 < fraction <= 1.0):
        raise ValueError("validation fraction must be in (0, 1]")
    size = int(round(fraction * n))
    size = max(1, size)
    chosen = rng.choice(n, size=size, replace=False)
    flags = np.zeros((n, stages), dtype=bool)
    flags[chosen, :] = True
    return flags


def generate_s1(n: int, psi22: float, rng: np.random.Generator,
                validation_fraction: float = 0.3) -> Dataset:
    """Two-stage data with prescribed proxies and covariate-driven nonadherence.

    X1 ~ N(1,1), X2 ~ N(1,4); prescriptions follow expit(X_j); the treatment
    actually taken follows expit(-4.6 - 0.83 X_j + 7.5 A_j*).  Stage contrasts
    are 1 + X1 and 1 + X2 + psi22 * A1; the treatment-free part is X1 and the
    noise variance is 2.
    """
    if n < 1:
        raise ValueError("n must be positive")
    x1 = rng.normal(1.0, 1.0, n)
    astar1 = rng.binomial(1, expit(x1)).astype(float)
    a1 = rng.binomial(1, expit(-4.6 - 0.83 * x1 + 7.5 * astar1)).astype(float)
    x2 = rng.normal(1.0, 2.0, n)
    astar2 = rng.binomial(1, expit(x2)).astype(float)
    a2 = rng.binomial(1, expit(-4.6 - 0.83 * x2 + 7.5 * astar2)).astype(float)
    eps = rng.normal(0.0, np.sqrt(2.0), n)

    c1 = 1.0 + x1
    c2 = 1.0 + x2 + psi22 * a1
    y = _regret_outcome(x1, eps, (c1, c2), (a1, a2))
    flags = _validation_flags(n, validation_fraction, rng, 2)
    return Dataset(
        ids=range(n),
        stage_covariates=[{"X": x1}, {"X": x2}],
        prescribed=[astar1, astar2],
        actual=[a1, a2],
        reported=[None, None],
        validation=flags,
        outcome=y,
    )


def generate_s3(n: int, rng: np.random.Generator, validation_fraction: float = 0.2,
                treatment_free_indicator: str = "actual") -> Dataset:
    """Coverage-study variant: assignment expit(0.5 + X1) / expit(-0.5 + X2),
    stage-2 contrast 1 + X2 - A1, and a direct 0.5-per-unit effect of the
    stage-1 treatment in the outcome.

    ``treatment_free_indicator`` selects whether that direct effect rides on
    the actual treatment (default) or on the prescription.  With "actual" the
    effect folds into the stage-1 contrast, shifting its intercept to 1.5;
    with "prescribed" the prescription affects the outcome outside the taken
    treatment, which the proxy-corrected estimators do not model.
    """
    if treatment_free_indicator not in ("actual", "prescribed"):
        raise ValueError("treatment_free_indicator must be 'actual' or 'prescribed'")
    x1 = rng.normal(1.0, 1.0, n)
    astar1 = rng.binomial(1, expit(0.5 + x1)).astype(float)
    a1 = rng.binomial(1, expit(-4.6 - 0.83 * x1 + 7.5 * astar1)).astype(float)
    x2 = rng.normal(1.0, 2.0, n)
    astar2 = rng.binomial(1, expit(-0.5 + x2)).astype(float)
    a2 = rng.binomial(1, expit(-4.6 - 0.83 * x2 + 7.5 * astar2)).astype(float)
    eps = rng.normal(0.0, np.sqrt(2.0), n)

    direct = a1 if treatment_free_indicator == "actual" else astar1
    c1 = 1.0 + x1
    c2 = 1.0 + x2 - a1
    y = _regret_outcome(x1 + 0.5 * direct, eps, (c1, c2), (a1, a2))
    flags = _validation_flags(n, validation_fraction, rng, 2)
    return Dataset(
        ids=range(n),
        stage_covariates=[{"X": x1}, {"X": x2}],
        prescribed=[astar1, astar2],
        actual=[a1, a2],
        reported=[None, None],
        validation=flags,
        outcome=y,
    )


def generate_s4(n: int, psi21: float, rng: np.random.Generator,
                validation_fraction: float = 0.3) -> Dataset:
    """Reported-treatment variant on three-point covariates.

    X1, X2 uniform on {-1, 0, 1}; the treatment taken follows 0.5 + 0.3 X_j;
    the report follows A_j (0.9 - 0.05 X_j) + (1 - A_j)(0.05 + 0.045 X_j +
    0.005 X_j^2).  Contrasts are 1 + X1 and 1 + psi21 * A1.
    """
    x1 = rng.integers(-1, 2, n).astype(float)
    a1 = rng.binomial(1, 0.5 + 0.3 * x1).astype(float)
    rep1 = rng.binomial(1, _report_prob(a1, x1)).astype(float)
    x2 = rng.integers(-1, 2, n).astype(float)
    a2 = rng.binomial(1, 0.5 + 0.3 * x2).astype(float)
    rep2 = rng.binomial(1, _report_prob(a2, x2)).astype(float)
    eps = rng.normal(0.0, np.sqrt(2.0), n)

    c1 = 1.0 + x1
    c2 = 1.0 + psi21 * a1
    y = _regret_outcome(x1, eps, (c1, c2), (a1, a2))
    flags = _validation_flags(n, validation_fraction, rng, 2)
    return Dataset(
        ids=range(n),
        stage_covariates=[{"X": x1}, {"X": x2}],
        prescribed=[None, None],
        actual=[a1, a2],
        reported=[rep1, rep2],
        validation=flags,
        outcome=y,
    )


def _report_prob(a, x):
    return a * (0.9 - 0.05 * x) + (1.0 - a) * (0.05 + 0.045 * x + 0.005 * x * x)


def reported_inverse_probability(stage, cov, proxy):
    """True probability the treatment was taken given covariate and report in
    the s4 mechanism, by Bayes inversion."""
    x = cov("X", stage)
    p = 0.5 + 0.3 * x
    r1 = 0.9 - 0.05 * x
    r0 = 0.05 + 0.045 * x + 0.005 * x * x
    proxy = np.asarray(proxy, dtype=float)
    num = np.where(proxy == 1.0, p * r1, p * (1.0 - r1))
    den = np.where(proxy == 1.0, p * r1 + (1.0 - p) * r0, p * (1.0 - r1) + (1.0 - p) * (1.0 - r0))
    return num / den


# ---------------------------------------------------------------------------
# Scenario analysis models and truths


def scenario_models(scenario: str, *, as_treated: bool = False) -> list:
    """Analysis model specs for a scenario.

    The as-treated comparator models the propensity of the treatment actually
    taken; on the prescription scenarios that propensity is logistic in the
    covariate and the prescription, so its assignment spec conditions on the
    stage proxy.  (On s4 the proxy is a report, a descendant of the treatment,
    and must not enter the assignment model; 0.5 + 0.3 X is exactly logistic
    in X there.)
    """
    if scenario in ("s1", "s2", "s3"):
        assign = "1 + X[{j}] + Astar[{j}]" if as_treated else "1 + X[{j}]"
        return [
            StageModelSpec.from_strings(
                contrast="1 + X[1]",
                treatment_free="1 + X[1]",
                assignment=assign.format(j=1),
                adherence="1 + X[1] + Astar[1]",
            ),
            StageModelSpec.from_strings(
                contrast="1 + X[2] + A[1]",
                treatment_free=(
                    "1 + X[1] + A[1]" if scenario == "s3"
                    else "1 + X[1] + A[1] + A[1]*X[1] + X[2]"
                ),
                assignment=assign.format(j=2),
                adherence="1 + X[2] + Astar[2]",
            ),
        ]
    if scenario == "s4":
        assign = "1 + X[{j}]" if as_treated else "1 + X[{j}] + X[{j}]*X[{j}]"
        return [
            StageModelSpec.from_strings(
                contrast="1 + X[1]",
                treatment_free="1 + X[1]",
                assignment=assign.format(j=1),
                adherence="1 + X[1] + Astar[1] + X[1]*Astar[1]",
            ),
            StageModelSpec.from_strings(
                contrast="1 + A[1]",
                treatment_free="1 + X[1] + X[1]*X[1] + A[1] + A[1]*X[1]",
                assignment=assign.format(j=2),
                adherence="1 + X[2] + Astar[2] + X[2]*Astar[2]",
            ),
        ]
    raise ValueError(f"unknown scenario '{scenario}'")


def scenario_truth(scenario: str, varied_param: float) -> np.ndarray:
    """Flattened true contrast parameters, stage 1 first."""
    if scenario == "s1":
        return np.array([1.0, 1.0, 1.0, 1.0, varied_param])
    if scenario == "s2":
        return np.array([1.0, 1.0, 1.0, 1.0, 0.0])
    if scenario == "s3":
        # The 0.5 direct effect of the stage-1 treatment folds into the
        # stage-1 contrast intercept.
        return np.array([1.5, 1.0, 1.0, 1.0, -1.0])
    if scenario == "s4":
        return np.array([1.0, 1.0, 1.0, varied_param])
    raise ValueError(f"unknown scenario '{scenario}'")


def known_adherence(scenario: str) -> AdherenceSource:
    if scenario in ("s1", "s2", "s3"):
        coef = np.asarray(PRESCRIBED_ADHERENCE_COEF, dtype=float)
        return AdherenceSource.known(coefficients=(coef, coef))
    if scenario == "s4":
        return AdherenceSource.known(probability=reported_inverse_probability)
    raise ValueError(f"unknown scenario '{scenario}'")


def scenario_mode(scenario: str, estimator: str) -> str:
    if estimator == "standard-actual":
        return "standard-actual"
    if estimator == "naive-proxy":
        return "standard-naive-proxy"
    return "modified-reported" if scenario == "s4" else "modified-prescribed"


def scenario_plan(scenario: str, estimator: str, *, exact_pseudo_outcomes=False) -> EstimationPlan:
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator '{estimator}'")
    adherence = None
    if estimator == "modified-known":
        adherence = known_adherence(scenario)
    elif estimator == "modified-fitted":
        adherence = AdherenceSource.fitted()
    specs = scenario_models(scenario, as_treated=estimator == "standard-actual")
    return EstimationPlan(
        specs=tuple(specs),
        mode=scenario_mode(scenario, estimator),
        adherence=adherence,
        exact_pseudo_outcomes=exact_pseudo_outcomes and estimator.startswith("modified"),
    )


# ---------------------------------------------------------------------------
# Replication engine


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    n: int
    replications: int
    seed: int
    validation_fraction: float = 0.3
    varied_param: float = 0.0
    estimators: tuple = ESTIMATORS
    coverage: bool = False
    coverage_level: float = 0.95
    exact_pseudo_outcomes: bool = False
    jobs: int = 1
    s3_treatment_free_indicator: str = "actual"

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario '{self.scenario}'")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.n < 2:
            raise ValueError("n must be >= 2")
        if not (0.0 < self.validation_fraction <= 1.0):
            raise ValueError("validation fraction must be in (0, 1]")
        object.__setattr__(self, "estimators", tuple(self.estimators))
        for est in self.estimators:
            if est not in ESTIMATORS:
                raise ValueError(f"unknown estimator '{est}'")
        if self.scenario == "s2" and self.varied_param != 0.0:
            raise ValueError("scenario s2 pins the varied parameter to 0")

    @property
    def effective_param(self) -> float:
        return 0.0 if self.scenario == "s2" else self.varied_param


def scenario_dataset(config: ScenarioConfig, rng: np.random.Generator) -> Dataset:
    if config.scenario in ("s1", "s2"):
        return generate_s1(config.n, config.effective_param, rng,
                           validation_fraction=config.validation_fraction)
    if config.scenario == "s3":
        return generate_s3(config.n, rng,
                           validation_fraction=config.validation_fraction,
                           treatment_free_indicator=config.s3_treatment_free_indicator)
    return generate_s4(config.n, config.effective_param, rng,
                       validation_fraction=config.validation_fraction)


def _replicate(config: ScenarioConfig, index: int):
    """One replicate: generate a dataset and run every requested estimator on it."""
    seq = np.random.SeedSequence(entropy=config.seed, spawn_key=(index,))
    rng = np.random.default_rng(seq)
    data = scenario_dataset(config, rng)
    truth = scenario_truth(config.scenario, config.effective_param)
    out = {}
    for name in config.estimators:
        plan = scenario_plan(config.scenario, name,
                             exact_pseudo_outcomes=config.exact_pseudo_outcomes)
        try:
            fit = plan.estimate(data)
            estimates = psi_flat(fit)
            hits = None
            if config.coverage:
                intervals = regime_wald_intervals(data, plan, fit, config.coverage_level)
                hits = ((intervals.lower <= truth) & (truth <= intervals.upper)).astype(float)
            out[name] = (estimates, hits, None)
        except Exception as err:  # noqa: BLE001 - failures are tallied
            out[name] = (None, None, str(err))
    return index, out


def _replicate_star(args):
    return _replicate(*args)


@dataclass
class ReplicationSummary:
    config: ScenarioConfig
    parameters: list  # (stage, term label)
    truth: np.ndarray
    replicate_indices: dict  # estimator -> array of successful replicate indices
    estimates: dict  # estimator -> (n_ok, P) array
    coverage: dict  # estimator -> per-parameter coverage (or None)
    failures: dict  # estimator -> count

    def statistics(self) -> dict:
        """Per-estimator, per-parameter mean, bias, variance, and 100 x MSE.

        The variance is the population (1/n) form so that
        MSE = bias^2 + variance holds exactly.
        """
        stats = {}
        for name, values in self.estimates.items():
            rows = []
            cov = self.coverage.get(name)
            for p, (stage, label) in enumerate(self.parameters):
                column = values[:, p]
                mean = float(np.mean(column))
                bias = mean - float(self.truth[p])
                variance = float(np.var(column))
                row = {
                    "stage": stage,
                    "parameter": label,
                    "truth": float(self.truth[p]),
                    "mean": mean,
                    "bias": bias,
                    "variance": variance,
                    "mse_x100": 100.0 * (bias * bias + variance),
                }
                if cov is not None:
                    row["coverage"] = float(cov[p])
                rows.append(row)
            stats[name] = {"failures": self.failures[name], "parameters": rows}
        return stats


def run_replications(config: ScenarioConfig, *, max_failure_fraction: float = 0.05) -> ReplicationSummary:
    """Run independently seeded replicates and aggregate estimator behavior.

    Each replicate generates one dataset and runs all requested estimators on
    it.  Replicate seed streams derive from the master seed by replicate
    index, so individual replicates are reproducible and results do not
    depend on the worker count.
    """
    tasks = [(config, i) for i in range(config.replications)]
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(_replicate_star, tasks, chunksize=4))
    else:
        results = [_replicate(config, i) for i in range(config.replications)]
    results.sort(key=lambda r: r[0])

    specs = scenario_models(config.scenario)
    parameters = [
        (j, label)
        for j, spec in enumerate(specs, start=1)
        for label in spec.contrast.term_labels()
    ]
    truth = scenario_truth(config.scenario, config.effective_param)

    indices = {name: [] for name in config.estimators}
    estimates = {name: [] for name in config.estimators}
    hits = {name: [] for name in config.estimators}
    failures = {name: 0 for name in config.estimators}
    first_error = {}
    for index, replicate_out in results:
        for name in config.estimators:
            est, hit, err = replicate_out[name]
            if err is not None:
                failures[name] += 1
                first_error.setdefault(name, err)
                continue
            indices[name].append(index)
            estimates[name].append(est)
            if hit is not None:
                hits[name].append(hit)

    for name in config.estimators:
        if failures[name] > max_failure_fraction * config.replications:
            raise ReplicationError(
                f"estimator '{name}' failed {failures[name]}/{config.replications} "
                f"replicates (first failure: {first_error[name]})"
            )
        if not estimates[name]:
            raise ReplicationError(f"estimator '{name}' produced no estimates")

    return ReplicationSummary(
        config=config,
        parameters=parameters,
        truth=truth,
        replicate_indices={n: np.asarray(v, dtype=int) for n, v in indices.items()},
        estimates={n: np.vstack(v) for n, v in estimates.items()},
        coverage={
            n: (np.vstack(v).mean(axis=0) if v else None) for n, v in hits.items()
        },
        failures=failures,
    )
