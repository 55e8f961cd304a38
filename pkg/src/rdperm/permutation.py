"""Permutation reference distributions and p-values.

Test statistics are compared against the uniform distribution over
treatment assignments with the treated count held fixed: exhaustively
when the number of assignments is small, otherwise by seeded Monte
Carlo. Monte Carlo draws are generated in fixed-size blocks, each block
seeded by a counter-based scheme keyed on (seed, block index), so
results are bit-identical regardless of how many workers evaluate the
blocks.
"""

from __future__ import annotations

import enum
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .exceptions import AllTreatedOrAllControlError
from .validation import as_float_vector, check_binary_vector, check_seed

#: Draws per Monte Carlo block. Fixed: changing it would change the
#: stream assigned to each draw index and therefore the results.
BLOCK_SIZE = 2048

#: Relative tolerance used when counting tail ties among statistic values.
TIE_RTOL = 1e-12


class StatKind(enum.Enum):
    DIFF_MEANS = "diff-means"
    ABS_DIFF_MEANS = "abs-diff-means"
    SUM_CROSS = "sum-cross"
    RANK_STUDENTIZED = "rank-studentized"

    @classmethod
    def from_string(cls, label: str) -> "StatKind":
        for member in cls:
            if member.value == label:
                return member
        raise ValueError(f"unknown statistic {label!r}")


class Sidedness(enum.Enum):
    UPPER = "upper"
    TWO_SIDED = "two-sided"


@dataclass(frozen=True)
class Statistic:
    """A test statistic kind plus its sidedness.

    ``ABS_DIFF_MEANS`` is the absolute difference in means and is always
    assessed in its upper tail; it coincides with the two-sided
    difference-in-means test.
    """

    kind: StatKind = StatKind.DIFF_MEANS
    sidedness: Sidedness = Sidedness.TWO_SIDED

    def __post_init__(self):
        if self.kind is StatKind.ABS_DIFF_MEANS and self.sidedness is not Sidedness.UPPER:
            object.__setattr__(self, "sidedness", Sidedness.UPPER)


@dataclass(frozen=True)
class PermutationPlan:
    """How to build the reference distribution.

    Enumeration is used when C(n, n_treated) does not exceed
    ``max_exact``; otherwise ``draws`` assignments are sampled uniformly
    without replacement within each draw. ``seed`` is required for the
    Monte Carlo path. ``threads`` bounds worker fan-out and never affects
    results.
    """

    statistic: Statistic = Statistic()
    draws: int = 100_000
    max_exact: int = 200_000
    seed: int | None = None
    threads: int = 1

    def __post_init__(self):
        if self.draws < 1:
            raise ValueError("draws must be positive")
        if self.max_exact < 1:
            raise ValueError("max_exact must be positive")
        if self.threads < 1:
            raise ValueError("threads must be positive")


@dataclass(frozen=True)
class TestResult:
    """Outcome of a permutation test.

    ``p_value`` uses the proportion of enumerated assignments on the
    exact path and the add-one convention ``(1 + hits) / (1 + draws)`` on
    the Monte Carlo path, so it is never zero. ``null_mean`` is the
    expected statistic under the uniform assignment distribution
    (analytic where available, otherwise the mean over the evaluated
    assignments).
    """

    observed: float
    p_value: float
    method: str
    draws: int
    null_mean: float
    statistic: Statistic
    n: int
    n_treated: int
    mc_stderr: float | None = None


class _StatEngine:
    """Vectorized statistic evaluation from treated-index matrices."""

    def __init__(self, statistic: Statistic, values: np.ndarray, n_treated: int):
        self.statistic = statistic
        self.n = len(values)
        self.n_t = n_treated
        self.n_c = self.n - n_treated
        if statistic.kind is StatKind.RANK_STUDENTIZED:
            if self.n_t < 2 or self.n_c < 2:
                raise ValueError("the studentized rank statistic needs 2 units per arm")
            self.vals = rankdata(values)  # mid-ranks under ties
        else:
            self.vals = values
        self.total = float(self.vals.sum())
        self.total_sq = float((self.vals**2).sum())

    def _from_sums(self, s1: np.ndarray, s2: np.ndarray | None) -> np.ndarray:
        kind = self.statistic.kind
        if kind is StatKind.SUM_CROSS:
            return s1
        diff = s1 / self.n_t - (self.total - s1) / self.n_c
        if kind is StatKind.DIFF_MEANS:
            return diff
        if kind is StatKind.ABS_DIFF_MEANS:
            return np.abs(diff)
        # Studentized rank: Welch-type standard error from the per-arm
        # mid-rank variances, so the scale adapts under heteroskedasticity.
        ss_t = np.clip(s2 - s1**2 / self.n_t, 0.0, None)
        s1_c = self.total - s1
        ss_c = np.clip((self.total_sq - s2) - s1_c**2 / self.n_c, 0.0, None)
        se2 = ss_t / (self.n_t - 1) / self.n_t + ss_c / (self.n_c - 1) / self.n_c
        num = s1 / self.n_t - s1_c / self.n_c
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / np.sqrt(se2)
        # 0/0 is a fully tied assignment: define the statistic as 0.
        zero_se = se2 <= 0.0
        if np.ndim(t) == 0:
            if zero_se:
                t = 0.0 if num == 0.0 else math.copysign(math.inf, num)
            return t
        with np.errstate(invalid="ignore"):
            t = np.where(zero_se & (num == 0.0), 0.0, t)
            t = np.where(zero_se & (num != 0.0), np.sign(num) * np.inf, t)
        return t

    def evaluate(self, treated_idx: np.ndarray) -> np.ndarray:
        taken = np.take(self.vals, treated_idx)
        s1 = taken.sum(axis=1)
        s2 = None
        if self.statistic.kind is StatKind.RANK_STUDENTIZED:
            s2 = (taken**2).sum(axis=1)
        return np.asarray(self._from_sums(s1, s2), dtype=float)

    def observed(self, treated: np.ndarray) -> float:
        sel = self.vals[treated == 1]
        s1 = np.asarray(sel.sum())
        s2 = np.asarray((sel**2).sum())
        return float(self._from_sums(s1, s2))

    def analytic_null_mean(self) -> float | None:
        if self.statistic.kind is StatKind.DIFF_MEANS:
            return 0.0
        if self.statistic.kind is StatKind.SUM_CROSS:
            return self.n_t / self.n * self.total
        return None

    def fold_center(self) -> float:
        """Center used for two-sided tail folding."""
        if self.statistic.kind is StatKind.SUM_CROSS:
            return self.n_t / self.n * self.total
        return 0.0


def exact_assignment_count(n: int, n_treated: int) -> int:
    return math.comb(n, n_treated)


def _exact_blocks(n: int, n_treated: int):
    combos = itertools.combinations(range(n), n_treated)
    while True:
        chunk = list(itertools.islice(combos, BLOCK_SIZE))
        if not chunk:
            return
        yield np.array(chunk, dtype=np.intp)


def _mc_block(seed: int, block_index: int, rows: int, n: int, n_treated: int) -> np.ndarray:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, block_index], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    keys = rng.random((rows, n))
    return np.argpartition(keys, n_treated - 1, axis=1)[:, :n_treated]


def statistic_draws(
    values_list: list[np.ndarray],
    treated: np.ndarray,
    plan: PermutationPlan,
) -> tuple[str, int, list[np.ndarray], list[float]]:
    """Evaluate the plan's statistic over a shared assignment sequence.

    Every vector in ``values_list`` is scored against the same
    assignments, which is what keeps confidence-interval grids free of
    independent Monte Carlo jitter between adjacent points.

    Returns ``(method, n_assignments, draws_per_vector, observed_per_vector)``.
    """
    treated = check_binary_vector(treated, "treated")
    n = len(treated)
    n_t = int(treated.sum())
    if n_t == 0 or n_t == n:
        raise AllTreatedOrAllControlError(
            f"{n_t} treated of {n} units; both arms must be non-empty"
        )
    engines = [_StatEngine(plan.statistic, as_float_vector(v, "values"), n_t) for v in values_list]
    observed = [eng.observed(treated) for eng in engines]

    n_comb = exact_assignment_count(n, n_t)
    if n_comb <= plan.max_exact:
        method, total = "exact", n_comb
        blocks = list(_exact_blocks(n, n_t))
        results = [[eng.evaluate(b) for b in blocks] for eng in engines]
        return method, total, [np.concatenate(r) for r in results], observed

    seed = check_seed(plan.seed, "the Monte Carlo permutation path")
    total = plan.draws
    n_blocks = (total + BLOCK_SIZE - 1) // BLOCK_SIZE

    def run_block(b: int) -> list[np.ndarray]:
        rows = min(BLOCK_SIZE, total - b * BLOCK_SIZE)
        idx = _mc_block(seed, b, rows, n, n_t)
        return [eng.evaluate(idx) for eng in engines]

    if plan.threads > 1 and n_blocks > 1:
        with ThreadPoolExecutor(max_workers=plan.threads) as pool:
            per_block = list(pool.map(run_block, range(n_blocks)))
    else:
        per_block = [run_block(b) for b in range(n_blocks)]
    # Reduce in block order: identical output for any worker count.
    draws = [
        np.concatenate([per_block[b][k] for b in range(n_blocks)])
        for k in range(len(engines))
    ]
    return "monte_carlo", total, draws, observed


def _tail_count(draws: np.ndarray, observed: float, statistic: Statistic, center: float) -> int:
    if statistic.sidedness is Sidedness.TWO_SIDED:
        draws = np.abs(draws - center)
        observed = abs(observed - center)
    finite = draws[np.isfinite(draws)]
    scale = max(1.0, float(np.max(np.abs(finite))) if len(finite) else 1.0)
    if math.isfinite(observed):
        scale = max(scale, abs(observed))
    return int(np.count_nonzero(draws >= observed - TIE_RTOL * scale))


def _is_constant(values: np.ndarray) -> bool:
    span = float(np.ptp(values))
    return span <= TIE_RTOL * max(1.0, float(np.max(np.abs(values))))


def permutation_test(values, treated, plan: PermutationPlan) -> TestResult:
    """Permutation p-value for ``values`` against the treatment labels.

    A constant ``values`` vector yields p = 1 by convention (the
    reference distribution is degenerate). On the exact path the p-value
    is the proportion of assignments at least as extreme as the observed
    one; on the Monte Carlo path the add-one convention guarantees
    validity.
    """
    values = as_float_vector(values, "values")
    treated = check_binary_vector(treated, "treated")
    n = len(values)
    n_t = int(treated.sum())
    if n_t == 0 or n_t == n:
        raise AllTreatedOrAllControlError(
            f"{n_t} treated of {n} units; both arms must be non-empty"
        )
    if _is_constant(values):
        engine = _StatEngine(plan.statistic, values, n_t)
        observed = engine.observed(treated)
        return TestResult(
            observed=observed,
            p_value=1.0,
            method="exact",
            draws=1,
            null_mean=observed,
            statistic=plan.statistic,
            n=n,
            n_treated=n_t,
        )

    method, total, (draws,), (observed,) = statistic_draws([values], treated, plan)
    engine = _StatEngine(plan.statistic, values, n_t)
    center = engine.fold_center()
    hits = _tail_count(draws, observed, plan.statistic, center)
    if method == "exact":
        p_value = hits / total
        mc_stderr = None
    else:
        p_value = (1 + hits) / (1 + total)
        mc_stderr = math.sqrt(p_value * (1 - p_value) / total)
    null_mean = engine.analytic_null_mean()
    if null_mean is None:
        finite = draws[np.isfinite(draws)]
        null_mean = float(finite.mean()) if len(finite) else math.nan
    return TestResult(
        observed=observed,
        p_value=p_value,
        method=method,
        draws=total,
        null_mean=null_mean,
        statistic=plan.statistic,
        n=n,
        n_treated=n_t,
        mc_stderr=mc_stderr,
    )


def null_expectation(
    values,
    n_treated: int,
    statistic: Statistic,
    plan: PermutationPlan | None = None,
) -> float:
    """Expected statistic under the uniform assignment distribution.

    Analytic for the difference in means (0) and the treated sum
    (n_treated / n times the total); otherwise computed by enumeration
    when feasible, falling back to the plan's seeded Monte Carlo draws.
    """
    values = as_float_vector(values, "values")
    n = len(values)
    if not 0 < n_treated < n:
        raise ValueError("n_treated must be strictly between 0 and n")
    engine = _StatEngine(statistic, values, n_treated)
    analytic = engine.analytic_null_mean()
    if analytic is not None:
        return analytic
    if plan is None:
        plan = PermutationPlan(statistic=statistic)
    plan_stat = plan if plan.statistic == statistic else PermutationPlan(
        statistic=statistic,
        draws=plan.draws,
        max_exact=plan.max_exact,
        seed=plan.seed,
        threads=plan.threads,
    )
    # Any valid labeling works: the reference distribution ignores it.
    labels = np.zeros(n, dtype=np.int8)
    labels[:n_treated] = 1
    _, _, (draws,), _ = statistic_draws([values], labels, plan_stat)
    finite = draws[np.isfinite(draws)]
    return float(finite.mean()) if len(finite) else math.nan
