"""Residualized covariate balance with a combined multivariate statistic.

Each covariate is de-trended against the running variable inside the
window (least squares for continuous covariates, logistic regression for
binary ones), and the treated-minus-control mean differences of the
residuals are combined into one quadratic-form statistic normalized by
their exact randomization covariance. The combined statistic gets an
approximate chi-square p-value and, optionally, a permutation p-value.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2, norm

from .detrend import ModelFamily, ModelSpec, fit_model
from .exceptions import (
    NoCovariatesError,
    NonConvergenceError,
    SeparationDetectedError,
)
from .frame import BINARY, UnitFrame, WindowSpec, realize_window
from .permutation import PermutationPlan, _mc_block, BLOCK_SIZE

logger = logging.getLogger(__name__)

#: Singular values below this fraction of the largest are treated as zero.
PINV_RTOL = 1e-10


@dataclass
class CovariateBalance:
    name: str
    model: str
    std_difference: float
    p_value: float


@dataclass
class BalanceResult:
    """Combined balance assessment over the window's covariates.

    ``combined_stat`` is the quadratic form d' S^+ d where d stacks the
    residual mean differences and S is their exact covariance under
    uniform assignment; ``df`` is the rank of S. ``p_chi2`` is the
    chi-square approximation; ``p_mc`` the optional permutation p-value.
    """

    per_covariate: list[CovariateBalance]
    combined_stat: float
    df: int
    p_chi2: float
    p_mc: float | None
    n: int
    n_treated: int
    n_control: int
    warnings: list[str] = field(default_factory=list)


def default_covariate_model(frame: UnitFrame, name: str) -> ModelSpec:
    """Linear de-trending for continuous covariates, logistic for binary."""
    kind = frame.covariates[name].kind
    if kind == BINARY:
        return ModelSpec(ModelFamily.LOGISTIC)
    return ModelSpec(ModelFamily.LINEAR)


def randomization_covariance(residual_matrix: np.ndarray, n_treated: int) -> np.ndarray:
    """Exact covariance of residual mean differences under uniform assignment.

    For a simple random sample of ``n_treated`` labels out of ``n``, the
    vector of treated-minus-control mean differences of the columns has
    covariance ``n / (n_treated * n_control) * S`` with ``S`` the sample
    covariance (denominator ``n - 1``) of the rows.
    """
    n = residual_matrix.shape[0]
    n_control = n - n_treated
    sample_cov = np.cov(residual_matrix, rowvar=False, ddof=1)
    sample_cov = np.atleast_2d(sample_cov)
    return n / (n_treated * n_control) * sample_cov


def _residualize(frame, idx, name, spec, warnings) -> tuple[np.ndarray, str]:
    running = frame.running[idx]
    values = frame.covariate_values(name)[idx]
    if np.ptp(values) == 0.0:
        warnings.append(f"covariate {name!r} is constant in the window; contributes nothing")
        return np.zeros(len(idx)), "constant"
    if spec.family is ModelFamily.LOGISTIC and len(np.unique(values)) < 2:
        spec = ModelSpec(ModelFamily.CONSTANT)
    try:
        fitted = fit_model(spec, running, values)
        return fitted.residuals, spec.describe()
    except (SeparationDetectedError, NonConvergenceError) as err:
        # A broken logistic fit should not sink the whole battery; a
        # linear-probability fit has comparable complexity.
        fallback = ModelSpec(ModelFamily.LINEAR)
        message = f"covariate {name!r}: {err.__class__.__name__}; fell back to linear fit"
        warnings.append(message)
        logger.warning(message)
        fitted = fit_model(fallback, running, values)
        return fitted.residuals, "linear (fallback)"


def balance_test(
    frame: UnitFrame,
    window: WindowSpec,
    covariate_models: dict[str, ModelSpec] | None = None,
    plan: PermutationPlan | None = None,
    mc: bool = False,
) -> BalanceResult:
    """Joint placebo test of covariate balance inside ``window``.

    Parameters
    ----------
    covariate_models : dict, optional
        Per-covariate de-trending specs; anything missing uses
        :func:`default_covariate_model`.
    plan : PermutationPlan, optional
        Supplies draw count and seed for the permutation p-value.
    mc : bool
        Also compute ``p_mc`` by permuting treatment labels and
        recomputing the quadratic form.
    """
    if not frame.covariates:
        raise NoCovariatesError("frame has no covariates to balance-test")
    idx = realize_window(frame, window)
    treated = frame.treated[idx]
    n = len(idx)
    n_t = int(treated.sum())
    n_c = n - n_t

    warnings: list[str] = []
    models = covariate_models or {}
    names = list(frame.covariates)
    residual_cols = []
    used_models = []
    for name in names:
        spec = models.get(name) or default_covariate_model(frame, name)
        residuals, used = _residualize(frame, idx, name, spec, warnings)
        residual_cols.append(residuals)
        used_models.append(used)
    residual_matrix = np.column_stack(residual_cols)

    mask = treated == 1
    diffs = residual_matrix[mask].mean(axis=0) - residual_matrix[~mask].mean(axis=0)
    covariance = randomization_covariance(residual_matrix, n_t)

    variances = np.diag(covariance)
    with np.errstate(divide="ignore", invalid="ignore"):
        std_diffs = np.where(variances > 0, diffs / np.sqrt(variances), 0.0)
    uni_p = 2.0 * norm.sf(np.abs(std_diffs))
    uni_p = np.where(variances > 0, uni_p, 1.0)

    # Pseudo-inverse with rank truncation: degenerate directions drop
    # out of both the statistic and the degrees of freedom.
    eigvals, eigvecs = np.linalg.eigh(covariance)
    cut = PINV_RTOL * max(eigvals.max(), 0.0) if len(eigvals) else 0.0
    keep = eigvals > cut
    df = int(keep.sum())
    if df < len(names):
        warnings.append(
            f"residual-difference covariance has rank {df} < {len(names)}; "
            "degenerate directions dropped"
        )
    pinv = (eigvecs[:, keep] / eigvals[keep]) @ eigvecs[:, keep].T
    combined = float(diffs @ pinv @ diffs) if df else 0.0
    combined = max(combined, 0.0)
    p_chi2 = float(chi2.sf(combined, df)) if df else 1.0

    p_mc = None
    if mc:
        if plan is None:
            raise ValueError("mc=True needs a plan for draws and seed")
        p_mc = _permutation_pvalue(residual_matrix, n_t, pinv, combined, plan)

    per_covariate = [
        CovariateBalance(name, used, float(sd), float(p))
        for name, used, sd, p in zip(names, used_models, std_diffs, uni_p)
    ]
    return BalanceResult(
        per_covariate=per_covariate,
        combined_stat=combined,
        df=df,
        p_chi2=p_chi2,
        p_mc=p_mc,
        n=n,
        n_treated=n_t,
        n_control=n_c,
        warnings=warnings,
    )


def _permutation_pvalue(residual_matrix, n_treated, pinv, observed, plan) -> float:
    """Add-one Monte Carlo p-value for the quadratic form.

    The covariance (hence ``pinv``) is label-free, so only the mean
    differences are recomputed per draw. Blocks follow the same
    counter-based seeding scheme as the rest of the package.
    """
    from .validation import check_seed

    n, k = residual_matrix.shape
    n_c = n - n_treated
    seed = check_seed(plan.seed, "the balance permutation p-value")
    totals = residual_matrix.sum(axis=0)
    hits = 0
    n_blocks = (plan.draws + BLOCK_SIZE - 1) // BLOCK_SIZE
    for b in range(n_blocks):
        rows = min(BLOCK_SIZE, plan.draws - b * BLOCK_SIZE)
        idx = _mc_block(seed, b, rows, n, n_treated)
        treated_sums = residual_matrix[idx].sum(axis=1)
        diffs = treated_sums / n_treated - (totals - treated_sums) / n_c
        stats = np.einsum("ij,jk,ik->i", diffs, pinv, diffs)
        hits += int(np.count_nonzero(stats >= observed - 1e-12 * max(1.0, observed)))
    return (1 + hits) / (1 + plan.draws)
