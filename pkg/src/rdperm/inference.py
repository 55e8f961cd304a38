"""Effect inference: hypothesis tests, confidence intervals, point estimates.

A constant-effect hypothesis ``tau0`` is tested by reconstructing the
control outcomes ``y - tau0 * z`` inside the window, refitting the
de-trending model to the reconstruction (a fresh fit at every
hypothesized value, never a reused one), and sending the residuals to a
permutation test. Confidence intervals invert that test over a grid of
hypothesized effects; the point estimate equates the observed statistic
with its null expectation, which for least-squares models paired with
the treated-sum statistic has a closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import median_abs_deviation

from .detrend import ModelSpec, fit_model, hat_residuals
from .exceptions import NoSignChangeError, RankDeficientDesignError
from .frame import UnitFrame, WindowSpec, realize_window, window_counts
from .permutation import (
    PermutationPlan,
    Sidedness,
    StatKind,
    Statistic,
    TestResult,
    permutation_test,
    statistic_draws,
)

#: Absolute tolerance, in effect units, for point-estimate root finding.
HL_XTOL = 1e-6

#: Bracket expansion is abandoned past this multiple of the initial width.
MAX_BRACKET_FACTOR = 64.0

DEFAULT_GRID_POINTS = 201


@dataclass(frozen=True)
class EffectHypothesis:
    """A hypothesized treatment effect.

    ``tau0`` is a constant effect in outcome units. ``effect_fn``, when
    given, supplies a deterministic per-unit effect as a function of the
    running variable and takes precedence over ``tau0``.
    """

    tau0: float = 0.0
    effect_fn: Callable[[np.ndarray], np.ndarray] | None = None

    def per_unit(self, running: np.ndarray) -> np.ndarray:
        if self.effect_fn is not None:
            return np.asarray(self.effect_fn(running), dtype=float)
        return np.full(len(running), self.tau0)


@dataclass
class EffectInference:
    """Test-inversion summary for a constant treatment effect.

    ``ci`` is ``None`` when every grid point was rejected (an empty
    confidence set: a finding about model or window misfit, not an
    error). Endpoints are ``+-inf`` when the non-rejected region reaches
    the edge of the grid, in which case a widening hint is appended to
    ``warnings``.
    """

    p_null: float
    ci: tuple[float, float] | None
    hl: float
    taus: np.ndarray
    p_values: np.ndarray
    alpha: float
    diagnostics: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)


def _window_data(frame: UnitFrame, window: WindowSpec):
    idx = realize_window(frame, window)
    return (
        idx,
        frame.running[idx],
        frame.outcome[idx],
        frame.treated[idx].astype(float),
    )


def _as_hypothesis(hypothesis) -> EffectHypothesis:
    if isinstance(hypothesis, EffectHypothesis):
        return hypothesis
    return EffectHypothesis(tau0=float(hypothesis))


def test_effect(
    frame: UnitFrame,
    window: WindowSpec,
    model: ModelSpec,
    hypothesis,
    plan: PermutationPlan,
) -> TestResult:
    """Permutation test of a treatment-effect hypothesis.

    With ``hypothesis == 0`` this is the test of strictly no effect on
    the observed outcomes; otherwise the hypothesized effect is removed
    from treated units before de-trending.
    """
    hyp = _as_hypothesis(hypothesis)
    _, running, outcome, treated = _window_data(frame, window)
    reconstructed = outcome - treated * hyp.per_unit(running)
    fitted = fit_model(model, running, reconstructed)
    return permutation_test(fitted.residuals, treated.astype(np.int8), plan)


def hl_estimate(
    frame: UnitFrame,
    window: WindowSpec,
    model: ModelSpec,
    plan: PermutationPlan,
    bracket: tuple[float, float] | None = None,
) -> float:
    """Point estimate equating the statistic to its null expectation.

    For a least-squares model with the treated-sum statistic the
    estimating equation is linear and solved in closed form as
    ``z'(I-H)y / z'(I-H)z``. Otherwise the crossing is found by
    bisection to ``1e-6`` in effect units, expanding the bracket
    geometrically from ``bracket`` (or a scale-based default); a flat
    crossing region returns the midpoint of its edges.
    """
    kind = plan.statistic.kind
    if kind not in (StatKind.SUM_CROSS, StatKind.DIFF_MEANS):
        raise ValueError("point estimation supports the treated-sum and difference-in-means statistics")
    _, running, outcome, treated = _window_data(frame, window)

    if model.is_ols and kind is StatKind.SUM_CROSS:
        ry = hat_residuals(model, running, outcome)
        rz = hat_residuals(model, running, treated)
        denom = float(treated @ rz)
        if abs(denom) <= 1e-12 * len(treated):
            raise RankDeficientDesignError(
                "treatment indicator lies in the span of the de-trending design"
            )
        return float(treated @ ry) / denom

    n = len(treated)
    n_t = int(treated.sum())

    def crossing(tau: float) -> float:
        reconstructed = outcome - tau * treated
        residuals = fit_model(model, running, reconstructed).residuals
        observed = _observed_stat(residuals, treated, kind)
        if kind is StatKind.DIFF_MEANS:
            return observed
        return observed - n_t / n * float(residuals.sum())

    if bracket is None:
        center, halfwidth = _default_center_scale(running, outcome, treated, model)
        bracket = (center - halfwidth, center + halfwidth)
    lo, hi = float(bracket[0]), float(bracket[1])
    if hi <= lo:
        hi = lo + max(1e-3, abs(lo) * 1e-3)
    width = hi - lo

    f_lo, f_hi = crossing(lo), crossing(hi)
    # The curve decreases in tau, so the sign change is (positive, negative).
    while not (f_lo > 0 >= f_hi or f_lo >= 0 > f_hi):
        if (hi - lo) > MAX_BRACKET_FACTOR * width:
            raise NoSignChangeError(
                f"no sign change within {MAX_BRACKET_FACTOR}x the initial bracket"
            )
        mid = 0.5 * (lo + hi)
        span = hi - lo
        lo, hi = mid - span, mid + span
        f_lo, f_hi = crossing(lo), crossing(hi)

    sup_positive = _bisect_edge(crossing, lo, hi, lambda v: v > 0)
    inf_negative = _bisect_edge(crossing, lo, hi, lambda v: v >= 0)
    return 0.5 * (sup_positive + inf_negative)


def _bisect_edge(func, lo: float, hi: float, stay_low) -> float:
    while hi - lo > HL_XTOL:
        mid = 0.5 * (lo + hi)
        if stay_low(func(mid)):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _observed_stat(values: np.ndarray, treated: np.ndarray, kind: StatKind) -> float:
    mask = treated == 1
    if kind is StatKind.SUM_CROSS:
        return float(values[mask].sum())
    return float(values[mask].mean() - values[~mask].mean())


def _default_center_scale(running, outcome, treated, model) -> tuple[float, float]:
    fitted = fit_model(model, running, outcome)
    n_t = int(treated.sum())
    n_c = len(treated) - n_t
    harmonic = 2.0 / (1.0 / n_t + 1.0 / n_c)
    spread = float(median_abs_deviation(fitted.residuals))
    scale = spread / math.sqrt(harmonic)
    center = 0.0
    if model.is_ols:
        rz = hat_residuals(model, running, treated.astype(float))
        denom = float(treated @ rz)
        if abs(denom) > 1e-12 * len(treated):
            ry = hat_residuals(model, running, outcome)
            center = float(treated @ ry) / denom
            # De-trending on the running variable absorbs most of the
            # treatment indicator's variation, which inflates the effect
            # scale well beyond the raw mean-difference scale; without
            # this term the default grid is too narrow to bound the
            # interval whenever treatment and running variable are
            # strongly collinear (the usual case over wide windows).
            scale = max(scale, 1.4826 * spread / math.sqrt(denom))
    halfwidth = 6.0 * scale
    if halfwidth <= 0.0:
        halfwidth = 1e-6 * max(1.0, abs(center))
    return center, halfwidth


def default_grid(
    frame: UnitFrame,
    window: WindowSpec,
    model: ModelSpec,
    plan: PermutationPlan,
    points: int = DEFAULT_GRID_POINTS,
) -> tuple[float, float, float]:
    """Grid rule: centered at the point estimate, half-width six times a
    robust residual scale, at least 200 points."""
    _, running, outcome, treated = _window_data(frame, window)
    _, halfwidth = _default_center_scale(running, outcome, treated, model)
    center = hl_estimate(frame, window, model, plan)
    points = max(points, 201)
    step = 2.0 * halfwidth / (points - 1)
    return center - halfwidth, center + halfwidth, step


def _grid_points(grid: tuple[float, float, float]) -> np.ndarray:
    lo, hi, step = grid
    if step <= 0:
        raise ValueError("grid step must be positive")
    count = int(round((hi - lo) / step)) + 1
    return lo + step * np.arange(max(count, 1))


_FAST_KINDS = {StatKind.DIFF_MEANS, StatKind.ABS_DIFF_MEANS, StatKind.SUM_CROSS}


def _grid_pvalues_fast(running, outcome, treated, model, plan, taus):
    """Shared-assignment p-values over the grid for linear statistics.

    For least-squares models the refit residuals at hypothesis ``tau``
    are exactly ``(I-H)y - tau (I-H)z``, and the statistics here are
    linear in the residual vector, so one pass of assignment draws scores
    every grid point.
    """
    base_kind = (
        StatKind.SUM_CROSS
        if plan.statistic.kind is StatKind.SUM_CROSS
        else StatKind.DIFF_MEANS
    )
    signed = Statistic(base_kind, Sidedness.UPPER)
    signed_plan = PermutationPlan(
        statistic=signed,
        draws=plan.draws,
        max_exact=plan.max_exact,
        seed=plan.seed,
        threads=plan.threads,
    )
    ry = hat_residuals(model, running, outcome)
    rz = hat_residuals(model, running, treated)
    z8 = treated.astype(np.int8)
    method, total, (dy, dz), (oy, oz) = statistic_draws([ry, rz], z8, signed_plan)

    two_sided = (
        plan.statistic.sidedness is Sidedness.TWO_SIDED
        or plan.statistic.kind is StatKind.ABS_DIFF_MEANS
    )
    tau_mag = float(np.max(np.abs(taus))) if len(taus) else 1.0
    scale = max(
        1.0,
        float(np.max(np.abs(dy))),
        float(np.max(np.abs(dz))) * max(1.0, tau_mag),
    )

    def p_at(tau: float) -> float:
        draw_vals = dy - tau * dz
        obs = oy - tau * oz
        if two_sided:
            # Residuals sum to zero under these designs, so both folded
            # statistics are centered at zero.
            draw_vals = np.abs(draw_vals)
            obs = abs(obs)
        hits = int(np.count_nonzero(draw_vals >= obs - 1e-12 * scale))
        if method == "exact":
            return hits / total
        return (1 + hits) / (1 + total)

    return np.array([p_at(t) for t in taus]), p_at, method, total


def invert_ci(
    frame: UnitFrame,
    window: WindowSpec,
    model: ModelSpec,
    plan: PermutationPlan,
    alpha: float = 0.05,
    grid: tuple[float, float, float] | None = None,
) -> EffectInference:
    """Confidence interval by inverting the effect test over a grid.

    Every grid point reuses one shared set of assignment draws, so the
    interval boundary is not jittered by independent Monte Carlo noise
    between adjacent hypotheses. The interval is the outer approximation
    ``[min accepted - step/2, max accepted + step/2]``, where a
    hypothesis is accepted when its p-value is at least ``alpha``.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must be strictly between 0 and 1")
    _, running, outcome, treated = _window_data(frame, window)
    if grid is None:
        grid = default_grid(frame, window, model, plan)
    taus = _grid_points(grid)
    step = grid[2]

    warnings: list[str] = []
    diagnostics: dict = {
        "window_counts": dict(
            zip(("n", "n_treated", "n_control"), window_counts(frame, realize_window(frame, window)))
        ),
        "model": model.describe(),
        "statistic": plan.statistic.kind.value,
        "sidedness": plan.statistic.sidedness.value,
        "grid": {"lo": float(taus[0]), "hi": float(taus[-1]), "step": float(step)},
    }

    if model.is_ols and plan.statistic.kind in _FAST_KINDS:
        p_values, p_at, method, total = _grid_pvalues_fast(
            running, outcome, treated, model, plan, taus
        )
        p_null = p_at(0.0)
    else:
        def p_at(tau: float) -> float:
            return test_effect(frame, window, model, tau, plan).p_value

        p_values = np.array([p_at(t) for t in taus])
        first = test_effect(frame, window, model, 0.0, plan)
        p_null, method, total = first.p_value, first.method, first.draws
    diagnostics["method"] = method
    diagnostics["assignments"] = total

    bracket = (float(taus[0]), float(taus[-1]))
    if plan.statistic.kind in (StatKind.SUM_CROSS, StatKind.DIFF_MEANS):
        hl = hl_estimate(frame, window, model, plan, bracket=bracket)
    else:
        # Point estimation is defined for the treated-sum and
        # difference-in-means statistics; fall back to the latter.
        fallback = PermutationPlan(
            statistic=Statistic(StatKind.DIFF_MEANS, plan.statistic.sidedness),
            draws=plan.draws,
            max_exact=plan.max_exact,
            seed=plan.seed,
            threads=plan.threads,
        )
        hl = hl_estimate(frame, window, model, fallback, bracket=bracket)

    accepted = np.flatnonzero(p_values >= alpha)
    if len(accepted) == 0:
        warnings.append(
            "empty confidence set: every grid hypothesis was rejected; "
            "this usually signals model or window misfit"
        )
        ci = None
    else:
        lower = float(taus[accepted[0]] - step / 2)
        upper = float(taus[accepted[-1]] + step / 2)
        if accepted[0] == 0:
            lower = -math.inf
            warnings.append("confidence set reaches the lower grid edge; widen the grid")
        if accepted[-1] == len(taus) - 1:
            upper = math.inf
            warnings.append("confidence set reaches the upper grid edge; widen the grid")
        ci = (lower, upper)
        if len(accepted) > 1:
            gaps = int(np.count_nonzero(np.diff(accepted) > 1))
            if gaps:
                diagnostics["acceptance_gaps"] = gaps
        if math.isfinite(lower) and math.isfinite(upper) and not lower <= hl <= upper:
            warnings.append("point estimate fell outside the interval (Monte Carlo noise?)")

    diagnostics["p_curve_unimodal"] = _roughly_unimodal(p_values, total, method)
    return EffectInference(
        p_null=p_null,
        ci=ci,
        hl=hl,
        taus=taus,
        p_values=p_values,
        alpha=alpha,
        diagnostics=diagnostics,
        warnings=warnings,
    )


def _roughly_unimodal(p_values: np.ndarray, total: int, method: str) -> bool:
    # Soft diagnostic only: rises then falls, give or take resolution noise.
    if len(p_values) < 3:
        return True
    slack = 2.0 / math.sqrt(total) if method == "monte_carlo" else 1.0 / total
    slack = max(slack, 1e-9)
    peak = int(np.argmax(p_values))
    before = p_values[: peak + 1]
    after = p_values[peak:]
    rising_ok = np.all(np.diff(before) >= -slack)
    falling_ok = np.all(np.diff(after) <= slack)
    return bool(rising_ok and falling_ok)
