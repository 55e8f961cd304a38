"""Tests for the de-trending model fits and the residual maker."""

import numpy as np
import pytest
from scipy.special import expit

from rdperm import ModelFamily, ModelSpec, ResponseTransform, fit_model, hat_residuals
from rdperm.exceptions import RankDeficientDesignError, SeparationDetectedError

CONSTANT = ModelSpec(ModelFamily.CONSTANT)
LINEAR = ModelSpec(ModelFamily.LINEAR)
QUADRATIC = ModelSpec(ModelFamily.QUADRATIC)
LOGISTIC = ModelSpec(ModelFamily.LOGISTIC)


class TestOlsFamilies:
    def test_constant_is_mean_centering(self):
        fit = fit_model(CONSTANT, np.array([10.0, 20.0, 30.0]), np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(fit.coef, [2.0])
        np.testing.assert_allclose(fit.residuals, [-1.0, 0.0, 1.0])

    def test_exact_linear_interpolation(self):
        r = np.array([0.0, 1.0, 2.0, 3.0])
        v = 2.0 + 3.0 * r
        fit = fit_model(LINEAR, r, v)
        np.testing.assert_allclose(fit.residuals, 0.0, atol=1e-10)

    def test_linear_against_normal_equations_oracle(self):
        # 2x2 normal equations solved by hand: theta = (0.9, 0.9).
        r = np.array([0.0, 1.0, 2.0, 3.0])
        v = np.array([1.0, 2.0, 2.0, 4.0])
        fit = fit_model(LINEAR, r, v)
        np.testing.assert_allclose(fit.coef, [0.9, 0.9], atol=1e-12)
        np.testing.assert_allclose(fit.residuals, [0.1, 0.2, -0.7, 0.4], atol=1e-12)

    def test_residuals_orthogonal_to_design(self):
        rng = np.random.default_rng(11)
        r = rng.uniform(-2, 2, 60)
        v = rng.normal(size=60)
        for spec in (CONSTANT, LINEAR, QUADRATIC):
            fit = fit_model(spec, r, v)
            tol = 1e-8 * len(r) * max(1.0, float(np.abs(v).max()))
            assert abs(fit.residuals.sum()) <= tol
            if spec is not CONSTANT:
                assert abs(fit.residuals @ r) <= tol

    def test_quadratic_reports_original_scale(self):
        rng = np.random.default_rng(4)
        r = rng.uniform(100, 110, 40)  # poorly conditioned without standardizing
        truth = np.array([5.0, -0.3, 0.02])
        v = truth[0] + truth[1] * r + truth[2] * r**2
        fit = fit_model(QUADRATIC, r, v)
        np.testing.assert_allclose(fit.coef, truth, rtol=1e-6)
        np.testing.assert_allclose(fit.residuals, 0.0, atol=1e-8)

    def test_shift_tilt_invariance(self):
        rng = np.random.default_rng(5)
        r = rng.uniform(-1, 1, 80)
        v = rng.normal(size=80)
        for spec in (LINEAR, QUADRATIC):
            base = fit_model(spec, r, v).residuals
            shifted = fit_model(spec, r, v + 3.0 - 2.0 * r).residuals
            np.testing.assert_allclose(base, shifted, atol=1e-9)

    def test_rank_deficient_constant_running(self):
        r = np.full(10, 0.5)
        with pytest.raises(RankDeficientDesignError):
            fit_model(LINEAR, r, np.arange(10.0))

    def test_weighted_fit_matches_replication(self):
        r = np.array([0.0, 1.0, 2.0, 3.0])
        v = np.array([1.0, 2.0, 2.0, 4.0])
        w = np.array([1.0, 2.0, 1.0, 3.0])
        weighted = fit_model(LINEAR, r, v, weights=w)
        replicated = fit_model(
            LINEAR, np.repeat(r, w.astype(int)), np.repeat(v, w.astype(int))
        )
        np.testing.assert_allclose(weighted.coef, replicated.coef, atol=1e-12)


class TestHatResiduals:
    def test_annihilates_column_span(self):
        r = np.array([0.0, 1.0, 2.0, 3.0, 4.0])
        v = 1.5 - 2.0 * r
        np.testing.assert_allclose(hat_residuals(LINEAR, r, v), 0.0, atol=1e-12)

    def test_linearity(self):
        rng = np.random.default_rng(9)
        r = rng.uniform(-1, 1, 30)
        v1, v2 = rng.normal(size=30), rng.normal(size=30)
        lhs = hat_residuals(LINEAR, r, v1 + v2)
        rhs = hat_residuals(LINEAR, r, v1) + hat_residuals(LINEAR, r, v2)
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_against_dense_hat_matrix_oracle(self):
        r = np.array([0.0, 1.0, 2.0, 3.0])
        v = np.array([1.0, 0.0, 0.0, 0.0])
        design = np.column_stack([np.ones(4), r])
        hat = design @ np.linalg.inv(design.T @ design) @ design.T
        oracle = (np.eye(4) - hat) @ v
        np.testing.assert_allclose(hat_residuals(LINEAR, r, v), oracle, atol=1e-12)

    def test_idempotence(self):
        rng = np.random.default_rng(2)
        r = rng.uniform(-1, 1, 25)
        v = rng.normal(size=25)
        once = hat_residuals(QUADRATIC, r, v)
        twice = hat_residuals(QUADRATIC, r, once)
        np.testing.assert_allclose(once, twice, atol=1e-9)

    def test_matches_fit_residuals(self):
        rng = np.random.default_rng(8)
        r = rng.uniform(-1, 1, 40)
        v = rng.normal(size=40)
        for spec in (CONSTANT, LINEAR, QUADRATIC):
            np.testing.assert_allclose(
                hat_residuals(spec, r, v), fit_model(spec, r, v).residuals, atol=1e-10
            )

    def test_rejects_logistic(self):
        with pytest.raises(ValueError, match="hat"):
            hat_residuals(LOGISTIC, np.arange(4.0), np.array([0.0, 1.0, 0.0, 1.0]))


class TestLogistic:
    def test_recovers_coefficients(self):
        rng = np.random.default_rng(21)
        r = rng.uniform(-2, 2, 4000)
        p = expit(0.3 + 0.8 * r)
        v = rng.binomial(1, p).astype(float)
        fit = fit_model(LOGISTIC, r, v)
        np.testing.assert_allclose(fit.coef, [0.3, 0.8], atol=0.15)
        assert abs(fit.residuals.mean()) < 1e-6

    def test_residuals_on_response_scale(self):
        rng = np.random.default_rng(22)
        r = rng.uniform(-1, 1, 500)
        v = rng.binomial(1, expit(r)).astype(float)
        fit = fit_model(LOGISTIC, r, v)
        probs = v - fit.residuals
        assert np.all((probs > 0) & (probs < 1))

    def test_separation_detected(self):
        r = np.linspace(-1, 1, 40)
        v = (r > 0).astype(float)
        with pytest.raises(SeparationDetectedError):
            fit_model(LOGISTIC, r, v)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="both classes"):
            fit_model(LOGISTIC, np.arange(5.0), np.zeros(5))


class TestLogitTransform:
    def test_logit_linear_on_percentiles(self):
        rng = np.random.default_rng(30)
        r = rng.uniform(-1, 1, 200)
        latent = expit(0.5 + 0.4 * r)
        spec = ModelSpec(ModelFamily.LINEAR, ResponseTransform.LOGIT)
        fit = fit_model(spec, r, latent)
        # Response is exactly linear on the logit scale, so residuals vanish.
        np.testing.assert_allclose(fit.residuals, 0.0, atol=1e-10)

    def test_boundary_values_clamped(self):
        r = np.linspace(-1, 1, 10)
        v = np.clip(np.linspace(0, 1, 10), 0.0, 1.0)
        spec = ModelSpec(ModelFamily.LINEAR, ResponseTransform.LOGIT)
        fit = fit_model(spec, r, v)
        assert np.all(np.isfinite(fit.residuals))
