"""Window selection: bandwidth sweeps, donut and surgical exclusions,
and count-balanced asymmetric windows.

Bandwidth selection runs the covariate balance battery at a descending
ladder of candidate bandwidths and applies the testing-in-order rule: a
candidate's hypothesis counts as rejected only when every wider
candidate was also rejected, which keeps the family-wise error of the
whole sweep at the per-test level. The density-test repair strategies
(donut, surgical) use the same sequential accounting at their own level.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .balance import balance_test
from .density import mccrary_test
from .detrend import ModelSpec
from .exceptions import DegenerateWindowError, EmptySideError, ExhaustedWithoutPassError, InsufficientBinsError
from .frame import UnitFrame, WindowSpec, realize_window, window_counts
from .permutation import PermutationPlan

logger = logging.getLogger(__name__)

DEFAULT_ALPHA_BALANCE = 0.1
DEFAULT_ALPHA_DENSITY = 0.05


@dataclass
class CandidateResult:
    bandwidth: float
    balance_p: float | None
    mccrary_p: float | None
    n: int | None
    n_treated: int | None
    n_control: int | None
    tested: bool
    note: str = ""


@dataclass
class BandwidthSweep:
    """Result of testing-in-order bandwidth selection.

    ``b_star`` is the widest candidate whose balance hypothesis survives
    the sequential rule, or ``None`` when every candidate is rejected
    (a reportable outcome, not an error). ``plausible_set`` collects the
    candidates at or below ``b_star``. ``alpha_budget`` states the
    combined specification-testing size ``alpha_balance + alpha_density``.
    """

    candidates: list[float]
    alpha_balance: float
    alpha_density: float
    results: list[CandidateResult]
    b_star: float | None
    plausible_set: list[float]

    @property
    def alpha_budget(self) -> float:
        return self.alpha_balance + self.alpha_density

    @property
    def all_rejected(self) -> bool:
        return self.b_star is None


def select_bandwidth(
    frame: UnitFrame,
    candidates,
    covariate_models: dict[str, ModelSpec] | None = None,
    alpha_balance: float = DEFAULT_ALPHA_BALANCE,
    plan: PermutationPlan | None = None,
    exclusions: tuple = (),
    exhaustive: bool = False,
    mccrary_options: dict | None = None,
    alpha_density: float = DEFAULT_ALPHA_DENSITY,
    balance_mc: bool = False,
) -> BandwidthSweep:
    """Choose the widest bandwidth whose balance test is sustained.

    Candidates must be strictly decreasing. Covariate models are refit
    inside every candidate window. By default the sweep stops at the
    first sustained candidate (everything narrower is plausible by
    construction and reported untested); ``exhaustive=True`` evaluates
    the whole ladder for robustness tables. ``exclusions`` are carried
    into every candidate window so density-test repairs compose with
    bandwidth choice. The density test is run per candidate for
    reporting whenever it is computable; it never drives ``b_star``.
    """
    candidates = [float(b) for b in candidates]
    if any(b2 >= b1 for b1, b2 in zip(candidates, candidates[1:])):
        raise ValueError("candidate bandwidths must be strictly decreasing")
    if not candidates:
        raise ValueError("no candidate bandwidths")

    results: list[CandidateResult] = []
    chain_rejected = True  # all wider candidates rejected so far
    b_star = None
    mccrary_options = mccrary_options or {}
    for bandwidth in candidates:
        window = WindowSpec(
            left=bandwidth, right=bandwidth, exclusions=exclusions, label=f"b={bandwidth:g}"
        )
        if not exhaustive and not chain_rejected:
            results.append(
                CandidateResult(bandwidth, None, None, None, None, None, tested=False,
                                note="untested: plausible by construction")
            )
            continue
        try:
            idx = realize_window(frame, window)
        except DegenerateWindowError as err:
            results.append(
                CandidateResult(bandwidth, None, None, None, None, None, tested=False,
                                note=f"skipped: {err}")
            )
            continue
        n, n_t, n_c = window_counts(frame, idx)
        balance = balance_test(frame, window, covariate_models, plan=plan, mc=balance_mc)
        balance_p = balance.p_mc if (balance_mc and balance.p_mc is not None) else balance.p_chi2
        mccrary_p = None
        try:
            mccrary_p = mccrary_test(frame, window, **mccrary_options).p_value
        except (EmptySideError, InsufficientBinsError) as err:
            logger.debug("density test unavailable at b=%g: %s", bandwidth, err)
        results.append(
            CandidateResult(bandwidth, balance_p, mccrary_p, n, n_t, n_c, tested=True)
        )
        rejected = balance_p < alpha_balance
        if chain_rejected and not rejected and b_star is None:
            b_star = bandwidth
        chain_rejected = chain_rejected and rejected

    plausible = [b for b in candidates if b_star is not None and b <= b_star]
    return BandwidthSweep(
        candidates=candidates,
        alpha_balance=alpha_balance,
        alpha_density=alpha_density,
        results=results,
        b_star=b_star,
        plausible_set=plausible,
    )


def donut_exclusion(
    frame: UnitFrame,
    base_window: WindowSpec,
    alpha_density: float = DEFAULT_ALPHA_DENSITY,
    step: float = 0.01,
    mccrary_options: dict | None = None,
    include_empty_first: bool | None = None,
) -> WindowSpec:
    """Grow a symmetric exclusion interval around the cutoff until the
    density test passes.

    The sweep removes ``|r - cutoff| <= k`` for ``k = 0, step, 2*step,
    ...`` and returns the base window augmented with the first passing
    exclusion (``p > alpha_density``); ``k = 0`` removes only units
    exactly at the cutoff. With ``include_empty_first`` (defaulting to
    True for continuous running variables, False for discrete ones,
    whose at-cutoff atom is usually the problem) the untouched window is
    tested first, so clean data comes back with no exclusion at all.
    Successive tests are nested and assessed in order, which bounds the
    family-wise error at ``alpha_density``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    mccrary_options = mccrary_options or {}

    if include_empty_first is None:
        idx = realize_window(frame, base_window, enforce=False)
        running = frame.running[idx]
        support = len(np.unique(running))
        include_empty_first = support > max(4, int(0.2 * len(running)))

    if include_empty_first:
        result = mccrary_test(frame, base_window, **mccrary_options)
        if result.p_value is not None and result.p_value > alpha_density:
            return base_window

    max_k = min(base_window.left, base_window.right)
    k = 0.0
    while k <= max_k + 1e-12:
        if k == 0.0:
            candidate = base_window.with_exclusions(
                [0.0], label=_join_label(base_window.label, "donut k=0")
            )
        else:
            candidate = base_window.with_exclusions(
                [(-k, k)], label=_join_label(base_window.label, f"donut k={k:g}")
            )
        try:
            result = mccrary_test(frame, candidate, **mccrary_options)
        except (EmptySideError, InsufficientBinsError) as err:
            raise ExhaustedWithoutPassError(
                f"density test became infeasible at k={k:g}: {err}"
            ) from err
        if result.p_value is not None and result.p_value > alpha_density:
            return candidate
        k = round(k + step, 12)
    raise ExhaustedWithoutPassError(
        f"no exclusion interval up to k={max_k:g} produced a density p-value above {alpha_density}"
    )


def surgical_exclusion(
    frame: UnitFrame,
    base_window: WindowSpec,
    hypotheses,
    alpha_density: float = DEFAULT_ALPHA_DENSITY,
    mccrary_options: dict | None = None,
) -> WindowSpec:
    """Remove substantively hypothesized sorter values until the density
    test passes.

    ``hypotheses`` is an ordered list of sets of running-variable values
    (relative to the cutoff): units hypothesized to have manipulated, or
    to have been able to. The sets are applied cumulatively; after each,
    the density test reruns, and the first window with
    ``p > alpha_density`` is returned (the untouched window is checked
    first, so vacuous surgery on clean data is a no-op). Testing in
    order keeps the family-wise error at ``alpha_density``. When the
    list runs out without a pass the caller must extend it; that is the
    ``ExhaustedWithoutPassError`` outcome.
    """
    mccrary_options = mccrary_options or {}
    result = mccrary_test(frame, base_window, **mccrary_options)
    if result.p_value is not None and result.p_value > alpha_density:
        return base_window

    cumulative: list[float] = []
    for hypothesis in hypotheses:
        for value in hypothesis:
            if value not in cumulative:
                cumulative.append(float(value))
        label = _join_label(
            base_window.label, "surgical {" + ", ".join(f"{v:g}" for v in cumulative) + "}"
        )
        candidate = base_window.with_exclusions(list(cumulative), label=label)
        result = mccrary_test(frame, candidate, **mccrary_options)
        if result.p_value is not None and result.p_value > alpha_density:
            return candidate
    raise ExhaustedWithoutPassError(
        "all hypothesized sorter sets applied and the density test still rejects; "
        "hypothesize additional sorters"
    )


def balanced_asymmetric_window(
    frame: UnitFrame,
    left: float,
    exclusions: tuple = (),
) -> WindowSpec:
    """Pick the right bandwidth that best balances treated and control counts.

    Scans the support of the running variable above the cutoff and
    returns the right boundary minimizing ``|n_treated - n_control|``
    for the window ``[cutoff - left, cutoff + right]`` (ties go to the
    smaller right bandwidth).
    """
    if left < 0:
        raise ValueError("left bandwidth must be nonnegative")
    centered = frame.centered_running
    above = np.unique(centered[centered > 0])
    if len(above) == 0:
        raise DegenerateWindowError("no units above the cutoff")

    best: tuple[int, float] | None = None
    for right in above:
        window = WindowSpec(left=left, right=float(right), exclusions=exclusions)
        idx = realize_window(frame, window, enforce=False)
        _, n_t, n_c = window_counts(frame, idx)
        imbalance = abs(n_t - n_c)
        if best is None or imbalance < best[0]:
            best = (imbalance, float(right))
    window = WindowSpec(
        left=left,
        right=best[1],
        exclusions=exclusions,
        label=f"balanced [{-left:g}, {best[1]:g}]",
    )
    realize_window(frame, window)  # enforce the degeneracy guard
    return window


def _join_label(base: str, suffix: str) -> str:
    return f"{base} + {suffix}" if base else suffix


def sweep_table(sweep: BandwidthSweep) -> list[dict]:
    """Sweep results as plain dicts with the robustness-table columns."""
    rows = []
    for result in sweep.results:
        rows.append(
            {
                "b": result.bandwidth,
                "balance_p": result.balance_p,
                "mccrary_p": result.mccrary_p,
                "n": result.n,
                "n_T": result.n_treated,
                "n_C": result.n_control,
            }
        )
    return rows
