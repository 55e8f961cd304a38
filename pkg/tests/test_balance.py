"""Tests for the residualized covariate balance battery."""

import numpy as np
import pytest
from scipy.stats import kstest

from rdperm import (
    Covariate,
    Direction,
    ModelFamily,
    ModelSpec,
    PermutationPlan,
    Statistic,
    StatKind,
    UnitFrame,
    full_window,
)
from rdperm.balance import balance_test, randomization_covariance
from rdperm.exceptions import NoCovariatesError
from rdperm.simlab import ConstantEffect, CovariateModel, DgpSpec, Uniform, generate

CONSTANT_MODELS = {f"x{i}": ModelSpec(ModelFamily.CONSTANT) for i in range(7)}


def independence_dgp(n=200, k=7):
    covs = {
        f"x{i}": CovariateModel(coeffs=(0.0,), noise_sd=1.0, binary=(i >= 5))
        for i in range(k)
    }
    return DgpSpec(
        n=n,
        running=Uniform(-1, 1),
        outcome_coeffs=(0.0, 1.0),
        noise_sd=1.0,
        effect=ConstantEffect(0.0),
        covariates=covs,
    )


def frame_with_covariates(running, covariates, direction=Direction.TREATED_AT_OR_BELOW):
    running = np.asarray(running, dtype=float)
    return UnitFrame(
        running=running,
        outcome=np.zeros_like(running),
        cutoff=0.0,
        direction=direction,
        covariates=covariates,
    )


class TestBasicContracts:
    def test_no_covariates_raises(self):
        frame = frame_with_covariates(np.linspace(-1, 1, 20), {})
        with pytest.raises(NoCovariatesError):
            balance_test(frame, full_window(frame))

    def test_constant_covariate_contributes_nothing(self):
        running = np.linspace(-1, 1, 30)
        frame = frame_with_covariates(running, {"flat": Covariate(np.full(30, 2.0))})
        result = balance_test(frame, full_window(frame))
        assert result.combined_stat == 0.0
        assert result.df == 0
        assert result.p_chi2 == 1.0
        assert any("constant" in w for w in result.warnings)

    def test_covariance_matches_mc_oracle(self):
        rng = np.random.default_rng(1)
        residuals = rng.normal(size=(80, 3))
        residuals[:, 2] = rng.binomial(1, 0.4, 80) - 0.4
        n_t = 30
        formula = randomization_covariance(residuals, n_t)
        draws = 100_000
        diffs = np.empty((draws, 3))
        for i in range(draws):
            idx = rng.permutation(80)[:n_t]
            mask = np.zeros(80, dtype=bool)
            mask[idx] = True
            diffs[i] = residuals[mask].mean(0) - residuals[~mask].mean(0)
        oracle = np.cov(diffs, rowvar=False)
        np.testing.assert_allclose(formula, oracle, rtol=0.05, atol=5e-5)

    def test_affine_rescaling_invariance(self):
        spec = independence_dgp(n=150, k=3)
        frame = generate(spec, 42)
        base = balance_test(frame, full_window(frame))
        rescaled_covs = dict(frame.covariates)
        rescaled_covs["x0"] = Covariate(5.0 * frame.covariate_values("x0") - 3.0)
        rescaled = frame_with_covariates(frame.running, rescaled_covs)
        rescaled = UnitFrame(
            running=frame.running,
            outcome=frame.outcome,
            cutoff=0.0,
            direction=frame.direction,
            covariates=rescaled_covs,
        )
        result = balance_test(rescaled, full_window(rescaled))
        assert result.combined_stat == pytest.approx(base.combined_stat, abs=1e-8)

    def test_row_order_invariance(self):
        spec = independence_dgp(n=120, k=3)
        frame = generate(spec, 5)
        rng = np.random.default_rng(0)
        perm = rng.permutation(frame.n)
        shuffled = frame.subset(perm)
        a = balance_test(frame, full_window(frame))
        b = balance_test(shuffled, full_window(shuffled))
        assert a.combined_stat == pytest.approx(b.combined_stat, abs=1e-10)
        assert a.p_chi2 == pytest.approx(b.p_chi2, abs=1e-12)

    def test_logistic_fallback_on_separation(self):
        running = np.linspace(-1, 1, 40)
        separated = (running > 0).astype(float)
        frame = frame_with_covariates(
            running, {"sep": Covariate(separated, "binary")}
        )
        result = balance_test(frame, full_window(frame))
        assert any("fell back" in w for w in result.warnings)
        assert result.per_covariate[0].model == "linear (fallback)"

    def test_imbalanced_covariate_detected(self):
        rng = np.random.default_rng(3)
        running = rng.uniform(-1, 1, 300)
        treated = (running <= 0).astype(float)
        shifted = rng.normal(size=300) + 1.5 * treated
        frame = frame_with_covariates(running, {"bad": Covariate(shifted)})
        result = balance_test(
            frame, full_window(frame), {"bad": ModelSpec(ModelFamily.CONSTANT)}
        )
        assert result.p_chi2 < 0.001


class TestDistributionalProperties:
    def test_chi2_p_uniform_under_independence(self):
        spec = independence_dgp()
        pvals = []
        for s in range(400):
            frame = generate(spec, [70, s])
            result = balance_test(frame, full_window(frame), CONSTANT_MODELS)
            pvals.append(result.p_chi2)
        assert kstest(np.array(pvals), "uniform").pvalue > 0.01

    def test_chi2_and_mc_agree(self):
        spec = independence_dgp()
        plan_stat = Statistic(StatKind.DIFF_MEANS)
        for s in range(25):
            frame = generate(spec, [70, s])
            plan = PermutationPlan(plan_stat, draws=1000, seed=s)
            result = balance_test(
                frame, full_window(frame), CONSTANT_MODELS, plan=plan, mc=True
            )
            stderr = np.sqrt(result.p_mc * (1 - result.p_mc) / plan.draws)
            assert abs(result.p_chi2 - result.p_mc) <= 4 * stderr

    def test_mc_p_deterministic(self):
        spec = independence_dgp(n=100, k=3)
        frame = generate(spec, 11)
        plan = PermutationPlan(Statistic(StatKind.DIFF_MEANS), draws=3000, seed=9)
        a = balance_test(frame, full_window(frame), plan=plan, mc=True)
        b = balance_test(frame, full_window(frame), plan=plan, mc=True)
        assert a.p_mc == b.p_mc
