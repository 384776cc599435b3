"""Logistic/linear fitting against closed forms and independent oracles."""

import numpy as np
import pytest

from dtr_adhere.glm import (
    NonConvergenceError,
    RankDeficiencyError,
    expit,
    fit_linear,
    fit_logistic,
    logistic_covariance,
    score_rows,
)


class TestExpit:
    def test_zero(self):
        assert expit(0.0) == 0.5

    @pytest.mark.parametrize("x", [0.5, 5.0, 30.0, -0.5, -5.0, -30.0])
    def test_reflection_identity(self, x):
        assert expit(x) == pytest.approx(1.0 - expit(-x), abs=1e-15)

    def test_adherence_mechanism_value(self):
        # 7.5 - 4.6 - 0.83 = 2.07 on the linear scale: adherence just under 0.89,
        # so roughly an 11% miss rate at covariate value 1 for the prescribed arm
        p = expit(7.5 - 4.6 - 0.83 * 1.0)
        assert p == pytest.approx(0.8880, abs=5e-4)
        assert 1.0 - p == pytest.approx(0.112, abs=1e-3)

    def test_saturates_without_overflow(self):
        assert expit(800.0) == 1.0
        assert expit(-800.0) == 0.0

    def test_monotone(self):
        x = np.linspace(-40, 40, 2001)
        assert np.all(np.diff(expit(x)) >= 0)

    def test_vector_and_scalar(self):
        np.testing.assert_allclose(expit(np.array([0.0, 1.0])), [0.5, expit(1.0)])


class TestFitLogistic:
    def test_intercept_only_half(self):
        y = np.array([0, 1, 0, 1], dtype=float)
        fit = fit_logistic(np.ones((4, 1)), y)
        assert fit.coefficients[0] == pytest.approx(0.0, abs=1e-10)

    def test_intercept_only_three_quarters(self):
        y = np.array([1, 1, 1, 0] * 5, dtype=float)
        fit = fit_logistic(np.ones((20, 1)), y)
        assert fit.coefficients[0] == pytest.approx(np.log(3.0), abs=1e-8)

    def test_against_grid_search_oracle(self):
        rng = np.random.default_rng(20240601)
        x = rng.normal(0.0, 1.0, 200)
        y = rng.binomial(1, expit(0.3 + 0.9 * x)).astype(float)
        design = np.column_stack([np.ones(200), x])
        fit = fit_logistic(design, y)

        def loglik(b0, b1):
            eta = b0 + b1 * x
            return float(np.sum(y * eta - np.logaddexp(0.0, eta)))

        # coarse-to-fine grid maximization, independent of the scoring iteration
        center, width = np.array([0.0, 0.0]), 3.0
        for _ in range(8):
            b0s = np.linspace(center[0] - width, center[0] + width, 21)
            b1s = np.linspace(center[1] - width, center[1] + width, 21)
            values = [(loglik(b0, b1), b0, b1) for b0 in b0s for b1 in b1s]
            _, b0, b1 = max(values)
            center, width = np.array([b0, b1]), width * 0.2
        np.testing.assert_allclose(fit.coefficients, center, atol=1e-4)

        se = np.sqrt(np.diag(logistic_covariance(fit, design)))
        assert abs(fit.coefficients[0] - 0.3) < 3 * se[0]
        assert abs(fit.coefficients[1] - 0.9) < 3 * se[1]

    def test_separation_raises(self):
        x = np.linspace(-1, 1, 30)
        y = (x > 0).astype(float)
        design = np.column_stack([np.ones(30), x])
        with pytest.raises((NonConvergenceError, RankDeficiencyError)):
            fit_logistic(design, y)

    def test_rank_deficiency_raises(self):
        x = np.ones(20)
        design = np.column_stack([x, 2 * x])
        y = np.array([0, 1] * 10, dtype=float)
        with pytest.raises(RankDeficiencyError):
            fit_logistic(design, y)

    def test_column_rescaling_invariance(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(300, 3))
        design = np.column_stack([np.ones(300), x])
        y = rng.binomial(1, expit(design @ np.array([0.2, 0.5, -0.7, 1.0]))).astype(float)
        scale = np.array([1.0, 10.0, 0.01, 5.0])
        fit = fit_logistic(design, y)
        fit_scaled = fit_logistic(design * scale, y)
        np.testing.assert_allclose(fit_scaled.coefficients * scale, fit.coefficients, atol=1e-7)
        np.testing.assert_allclose(
            expit(design @ fit.coefficients),
            expit((design * scale) @ fit_scaled.coefficients),
            atol=1e-8,
        )


class TestFitLinear:
    def test_mean(self):
        fit = fit_linear(np.ones((3, 1)), np.array([1.0, 2.0, 3.0]))
        assert fit.coefficients[0] == pytest.approx(2.0)

    def test_exact_line(self):
        x = np.array([0.0, 1.0, 4.0])
        design = np.column_stack([np.ones(3), x])
        fit = fit_linear(design, 2.0 + 3.0 * x)
        np.testing.assert_allclose(fit.coefficients, [2.0, 3.0], atol=1e-12)

    def test_normal_equations_oracle(self):
        rng = np.random.default_rng(7)
        design = rng.normal(size=(50, 3))
        y = rng.normal(size=50)
        fit = fit_linear(design, y)
        residuals = y - design @ fit.coefficients
        np.testing.assert_allclose(design.T @ residuals, np.zeros(3), atol=1e-9)

    def test_rank_deficiency(self):
        design = np.column_stack([np.ones(10), np.ones(10)])
        with pytest.raises(RankDeficiencyError):
            fit_linear(design, np.arange(10.0))

    def test_column_rescaling_invariance(self):
        rng = np.random.default_rng(9)
        design = np.column_stack([np.ones(40), rng.normal(size=(40, 2))])
        y = rng.normal(size=40)
        scale = np.array([2.0, 0.25, 40.0])
        fit = fit_linear(design, y)
        fit_scaled = fit_linear(design * scale, y)
        np.testing.assert_allclose(fit_scaled.coefficients * scale, fit.coefficients, atol=1e-8)


class TestScoreRows:
    def test_columns_sum_to_zero_at_fit(self):
        rng = np.random.default_rng(5)
        design = np.column_stack([np.ones(400), rng.normal(size=(400, 2))])
        y = rng.binomial(1, expit(design @ np.array([0.1, -0.4, 0.8]))).astype(float)
        fit = fit_logistic(design, y)
        np.testing.assert_allclose(
            score_rows(fit, design, y).sum(axis=0), np.zeros(3), atol=1e-6
        )
        y_lin = rng.normal(size=400)
        lin = fit_linear(design, y_lin)
        np.testing.assert_allclose(
            score_rows(lin, design, y_lin).sum(axis=0), np.zeros(3), atol=1e-8
        )

    def test_single_logistic_row(self):
        from dtr_adhere.glm import GlmFit

        fit = GlmFit(coefficients=np.array([0.0]), converged=True, iterations=0, family="logistic")
        rows = score_rows(fit, np.array([[1.0]]), np.array([1.0]))
        assert rows[0, 0] == pytest.approx(0.5)

    def test_exact_linear_fit_scores_vanish(self):
        x = np.array([0.0, 1.0, 2.0])
        design = np.column_stack([np.ones(3), x])
        fit = fit_linear(design, 1.0 + 2.0 * x)
        np.testing.assert_allclose(
            score_rows(fit, design, 1.0 + 2.0 * x), np.zeros((3, 2)), atol=1e-12
        )

    def test_weights_scale_scores(self):
        rng = np.random.default_rng(8)
        design = np.column_stack([np.ones(50), rng.normal(size=50)])
        y = rng.binomial(1, 0.5, 50).astype(float)
        fit = fit_logistic(design, y)
        w = rng.uniform(0.5, 2.0, 50)
        np.testing.assert_allclose(
            score_rows(fit, design, y, weights=w),
            score_rows(fit, design, y) * w[:, None],
        )
