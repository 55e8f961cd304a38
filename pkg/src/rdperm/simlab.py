"""Synthetic data generation and Monte Carlo verification experiments.

The experiments check the statistical guarantees the library leans on:
size of the sharp-null test, confidence-interval coverage under constant
and randomly varying effects, exact agreement of the closed-form point
estimate with the joint least-squares coefficient, family-wise error of
the sequential bandwidth sweep, and the expectation equality of
reconstructed residuals across arms. Every run is reproducible
bit-for-bit from (spec, seed, n_seeds).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .detrend import ModelFamily, ModelSpec, fit_model
from .frame import Covariate, Direction, UnitFrame, WindowSpec, full_window, realize_window
from .inference import hl_estimate, invert_ci, test_effect
from .permutation import PermutationPlan, Sidedness, StatKind, Statistic
from .windowing import balanced_asymmetric_window, select_bandwidth


# ---------------------------------------------------------------------------
# Data-generating process specification


@dataclass(frozen=True)
class Uniform:
    low: float = -1.0
    high: float = 1.0

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.low, self.high, n)


@dataclass(frozen=True)
class DiscreteGrid:
    """Evenly spaced support points, optionally with unequal weights."""

    low: float = -1.0
    high: float = 1.0
    step: float = 0.01
    weights: tuple | None = None

    def support(self) -> np.ndarray:
        count = int(round((self.high - self.low) / self.step)) + 1
        return np.round(self.low + self.step * np.arange(count), 12)

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        support = self.support()
        probs = None
        if self.weights is not None:
            probs = np.asarray(self.weights, dtype=float)
            probs = probs / probs.sum()
        return rng.choice(support, size=n, p=probs)


@dataclass(frozen=True)
class ConstantEffect:
    tau: float = 0.0

    @property
    def mean(self) -> float:
        return self.tau

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.full(n, self.tau)


@dataclass(frozen=True)
class RandomEffect:
    """Unit effects i.i.d. around a mean, independent of the running variable."""

    mean: float = 0.0
    sd: float = 1.0

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.mean + rng.normal(0.0, self.sd, n)


@dataclass(frozen=True)
class CovariateModel:
    """Polynomial mean in the running variable plus noise (or a logistic
    link for binary covariates)."""

    coeffs: tuple = (0.0,)
    noise_sd: float = 1.0
    binary: bool = False

    def draw(self, rng: np.random.Generator, running: np.ndarray):
        mean = np.polynomial.polynomial.polyval(running, self.coeffs)
        if self.binary:
            values = rng.binomial(1, expit(mean)).astype(float)
            return Covariate(values, "binary")
        return Covariate(mean + rng.normal(0.0, self.noise_sd, len(running)), "continuous")


@dataclass(frozen=True)
class HeapAt:
    """Relocate a mass fraction of units to one running value.

    The ``fraction`` of all units whose running values lie closest to
    ``source`` have their recorded running value replaced by ``value``.
    Potential outcomes and covariates are untouched: manipulation moves
    the score, not the person.
    """

    value: float
    fraction: float
    source: float


@dataclass(frozen=True)
class DgpSpec:
    n: int
    running: Uniform | DiscreteGrid = Uniform()
    cutoff: float = 0.0
    direction: Direction = Direction.TREATED_AT_OR_BELOW
    outcome_coeffs: tuple = (0.0,)
    noise_sd: float = 1.0
    effect: ConstantEffect | RandomEffect = ConstantEffect(0.0)
    covariates: dict[str, CovariateModel] = field(default_factory=dict)
    manipulation: HeapAt | None = None

    def __post_init__(self):
        if self.n < 4:
            raise ValueError("need at least 4 units")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")
        if self.manipulation is not None and not 0 < self.manipulation.fraction < 1:
            raise ValueError("manipulated fraction must lie in (0, 1)")


def generate(spec: DgpSpec, seed) -> UnitFrame:
    """Draw one frame from ``spec``; identical seeds give identical frames."""
    rng = np.random.default_rng(seed)
    running = spec.running.draw(rng, spec.n)
    control_outcome = np.polynomial.polynomial.polyval(running, spec.outcome_coeffs)
    if spec.noise_sd > 0:
        control_outcome = control_outcome + rng.normal(0.0, spec.noise_sd, spec.n)
    effects = spec.effect.draw(rng, spec.n)
    covariates = {
        name: model.draw(rng, running) for name, model in spec.covariates.items()
    }

    if spec.manipulation is not None:
        moved = int(round(spec.manipulation.fraction * spec.n))
        order = np.argsort(np.abs(running - spec.manipulation.source), kind="stable")
        running = running.copy()
        running[order[:moved]] = spec.manipulation.value

    # Treatment follows the (possibly manipulated) recorded score.
    if spec.direction is Direction.TREATED_AT_OR_BELOW:
        z = running <= spec.cutoff
    else:
        z = running > spec.cutoff
    outcome = np.where(z, control_outcome + effects, control_outcome)
    return UnitFrame(
        running=running,
        outcome=outcome,
        cutoff=spec.cutoff,
        direction=spec.direction,
        covariates=covariates,
    )


# ---------------------------------------------------------------------------
# Experiment harness


@dataclass
class ExperimentReport:
    name: str
    n_seeds: int
    metric: str
    value: float
    mc_stderr: float
    passed: bool
    band: str
    details: dict = field(default_factory=dict)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"[{status}] {self.name}: {self.metric} = {self.value:.4f} "
            f"(stderr {self.mc_stderr:.4f}; {self.band})"
        )


@dataclass(frozen=True)
class InferenceConfig:
    """Analysis settings shared by the experiments."""

    model: ModelSpec = ModelSpec(ModelFamily.LINEAR)
    statistic: Statistic = Statistic(StatKind.DIFF_MEANS, Sidedness.TWO_SIDED)
    draws: int = 1999
    max_exact: int = 10_000
    window: tuple[float, float] | None = None
    balanced_left: float | None = None
    grid: tuple[float, float, float] | None = None
    threads: int = 1

    def plan(self, seed: int) -> PermutationPlan:
        return PermutationPlan(
            statistic=self.statistic,
            draws=self.draws,
            max_exact=self.max_exact,
            seed=seed,
            threads=self.threads,
        )

    def window_for(self, frame: UnitFrame) -> WindowSpec:
        if self.balanced_left is not None:
            return balanced_asymmetric_window(frame, self.balanced_left)
        if self.window is not None:
            return WindowSpec(left=self.window[0], right=self.window[1])
        return full_window(frame)


def _seed_for(master: int, index: int) -> int:
    return int(np.random.SeedSequence((master, index)).generate_state(1)[0])


def run_size_experiment(
    spec: DgpSpec,
    config: InferenceConfig,
    n_seeds: int,
    alpha: float = 0.05,
    seed: int = 0,
    name: str = "size",
) -> ExperimentReport:
    """Rejection rate of the effect test at the true (mean) effect.

    Under a constant-effect process the test is exact, so the rate must
    sit within three binomial standard errors of ``alpha``.
    """
    rejections = 0
    tau_true = spec.effect.mean if isinstance(spec.effect, ConstantEffect) else spec.effect.mean
    for i in range(n_seeds):
        frame = generate(spec, _seed_for(seed, i))
        plan = config.plan(_seed_for(seed, n_seeds + i))
        result = test_effect(frame, config.window_for(frame), config.model, tau_true, plan)
        rejections += result.p_value < alpha
    rate = rejections / n_seeds
    stderr = math.sqrt(alpha * (1 - alpha) / n_seeds)
    passed = abs(rate - alpha) <= 3 * stderr
    return ExperimentReport(
        name=name,
        n_seeds=n_seeds,
        metric=f"rejection rate at alpha={alpha}",
        value=rate,
        mc_stderr=stderr,
        passed=passed,
        band=f"target {alpha} +/- {3 * stderr:.4f}",
        details={"alpha": alpha, "tau_tested": tau_true},
    )


def run_coverage_experiment(
    spec: DgpSpec,
    config: InferenceConfig,
    n_seeds: int,
    level: float = 0.95,
    seed: int = 0,
    name: str = "coverage",
) -> ExperimentReport:
    """Empirical confidence-interval coverage of the true mean effect.

    Randomly varying effects require a count-balanced window and the
    difference-in-means statistic for asymptotic validity; configure
    ``balanced_left`` for that regime.
    """
    tau_true = spec.effect.mean
    covered = 0
    unbounded = 0
    for i in range(n_seeds):
        frame = generate(spec, _seed_for(seed, i))
        plan = config.plan(_seed_for(seed, n_seeds + i))
        inference = invert_ci(
            frame,
            config.window_for(frame),
            config.model,
            plan,
            alpha=1 - level,
            grid=config.grid,
        )
        if inference.ci is not None:
            lower, upper = inference.ci
            covered += lower <= tau_true <= upper
            unbounded += not (math.isfinite(lower) and math.isfinite(upper))
    rate = covered / n_seeds
    stderr = math.sqrt(level * (1 - level) / n_seeds)
    passed = rate >= level - 3 * stderr
    return ExperimentReport(
        name=name,
        n_seeds=n_seeds,
        metric=f"coverage of tau={tau_true}",
        value=rate,
        mc_stderr=stderr,
        passed=passed,
        band=f"target >= {level - 3 * stderr:.4f}",
        details={"level": level, "unbounded_intervals": unbounded},
    )


def run_equivalence_check(
    n_instances: int = 100,
    seed: int = 0,
    name: str = "hl-ols-equivalence",
) -> ExperimentReport:
    """Closed-form point estimate versus the joint least-squares fit.

    On every instance the treated-sum estimate under a linear model must
    match the treatment coefficient of the regression of the outcome on
    an intercept, the running variable, and treatment, to 1e-8 relative.
    """
    rng = np.random.default_rng(seed)
    plan = PermutationPlan(statistic=Statistic(StatKind.SUM_CROSS, Sidedness.TWO_SIDED), seed=0)
    model = ModelSpec(ModelFamily.LINEAR)
    worst = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(20, 201))
        spec = DgpSpec(
            n=n,
            running=Uniform(-1.0, 1.0),
            outcome_coeffs=(float(rng.normal()), float(rng.normal())),
            noise_sd=float(rng.uniform(0.2, 2.0)),
            effect=ConstantEffect(float(rng.normal())),
        )
        frame = generate(spec, int(rng.integers(0, 2**32)))
        window = full_window(frame)
        estimate = hl_estimate(frame, window, model, plan)
        idx = realize_window(frame, window)
        design = np.column_stack(
            [np.ones(len(idx)), frame.running[idx], frame.treated[idx].astype(float)]
        )
        ols = float(np.linalg.lstsq(design, frame.outcome[idx], rcond=None)[0][2])
        worst = max(worst, abs(estimate - ols) / max(1.0, abs(ols)))
    passed = worst <= 1e-8
    return ExperimentReport(
        name=name,
        n_seeds=n_instances,
        metric="max relative difference",
        value=worst,
        mc_stderr=0.0,
        passed=passed,
        band="<= 1e-8",
    )


def run_fwer_experiment(
    spec: DgpSpec,
    candidates,
    n_seeds: int,
    alpha_balance: float = 0.1,
    seed: int = 0,
    covariate_models: dict | None = None,
    name: str = "fwer",
) -> ExperimentReport:
    """Family-wise error rate of the testing-in-order bandwidth sweep.

    On a process where every candidate's balance hypothesis is true, the
    probability that the sequential rule rejects anything must stay at
    or below ``alpha_balance``.
    """
    candidates = [float(b) for b in candidates]
    any_rejection = 0
    for i in range(n_seeds):
        frame = generate(spec, _seed_for(seed, i))
        sweep = select_bandwidth(
            frame,
            candidates,
            covariate_models=covariate_models,
            alpha_balance=alpha_balance,
        )
        any_rejection += sweep.b_star != candidates[0]
    rate = any_rejection / n_seeds
    stderr = math.sqrt(alpha_balance * (1 - alpha_balance) / n_seeds)
    passed = rate <= alpha_balance + 3 * stderr
    return ExperimentReport(
        name=name,
        n_seeds=n_seeds,
        metric="any-false-rejection rate",
        value=rate,
        mc_stderr=stderr,
        passed=passed,
        band=f"<= {alpha_balance + 3 * stderr:.4f}",
        details={"alpha_balance": alpha_balance, "candidates": candidates},
    )


def run_residual_equality_check(
    spec: DgpSpec,
    config: InferenceConfig,
    n_seeds: int,
    seed: int = 0,
    name: str = "residual-equality",
) -> ExperimentReport:
    """Mean reconstructed residual, treated arm minus control arm.

    With unit effects varying randomly around the hypothesized mean and
    independently of the running variable, the residuals of the
    reconstruction have equal expectations across arms; the seed-averaged
    difference must be statistically indistinguishable from zero.
    """
    tau_true = spec.effect.mean
    diffs = np.empty(n_seeds)
    for i in range(n_seeds):
        frame = generate(spec, _seed_for(seed, i))
        window = config.window_for(frame)
        idx = realize_window(frame, window)
        running = frame.running[idx]
        treated = frame.treated[idx].astype(bool)
        reconstructed = frame.outcome[idx] - tau_true * treated
        residuals = fit_model(config.model, running, reconstructed).residuals
        diffs[i] = residuals[treated].mean() - residuals[~treated].mean()
    value = float(diffs.mean())
    stderr = float(diffs.std(ddof=1) / math.sqrt(n_seeds))
    passed = abs(value) <= 3 * stderr
    return ExperimentReport(
        name=name,
        n_seeds=n_seeds,
        metric="mean treated-control residual difference",
        value=value,
        mc_stderr=stderr,
        passed=passed,
        band=f"|value| <= {3 * stderr:.5f}",
    )


# ---------------------------------------------------------------------------
# Config-file front end (used by the command line)


def _running_from_dict(data: dict):
    kind = data.get("kind", "uniform")
    if kind == "uniform":
        return Uniform(float(data.get("low", -1.0)), float(data.get("high", 1.0)))
    if kind == "grid":
        weights = data.get("weights")
        return DiscreteGrid(
            float(data.get("low", -1.0)),
            float(data.get("high", 1.0)),
            float(data.get("step", 0.01)),
            tuple(weights) if weights is not None else None,
        )
    raise ValueError(f"unknown running distribution {kind!r}")


def _effect_from_dict(data: dict):
    kind = data.get("kind", "constant")
    if kind == "constant":
        return ConstantEffect(float(data.get("tau", 0.0)))
    if kind == "random":
        return RandomEffect(float(data.get("mean", 0.0)), float(data.get("sd", 1.0)))
    raise ValueError(f"unknown effect model {kind!r}")


def dgp_from_dict(data: dict) -> DgpSpec:
    covariates = {
        name: CovariateModel(
            coeffs=tuple(cov.get("coeffs", (0.0,))),
            noise_sd=float(cov.get("noise_sd", 1.0)),
            binary=bool(cov.get("binary", False)),
        )
        for name, cov in data.get("covariates", {}).items()
    }
    manipulation = None
    if "manipulation" in data and data["manipulation"] is not None:
        m = data["manipulation"]
        manipulation = HeapAt(float(m["value"]), float(m["fraction"]), float(m["source"]))
    return DgpSpec(
        n=int(data["n"]),
        running=_running_from_dict(data.get("running", {})),
        cutoff=float(data.get("cutoff", 0.0)),
        direction=Direction.from_string(data.get("direction", "below")),
        outcome_coeffs=tuple(data.get("outcome_coeffs", (0.0,))),
        noise_sd=float(data.get("noise_sd", 1.0)),
        effect=_effect_from_dict(data.get("effect", {})),
        covariates=covariates,
        manipulation=manipulation,
    )


def inference_config_from_dict(data: dict) -> InferenceConfig:
    statistic = Statistic(
        StatKind.from_string(data.get("statistic", "diff-means")),
        Sidedness.TWO_SIDED if data.get("sidedness", "two-sided") == "two-sided" else Sidedness.UPPER,
    )
    window = data.get("window")
    grid = data.get("grid")
    return InferenceConfig(
        model=ModelSpec(ModelFamily.from_string(data.get("model", "linear"))),
        statistic=statistic,
        draws=int(data.get("draws", 1999)),
        max_exact=int(data.get("max_exact", 10_000)),
        window=tuple(window) if window is not None else None,
        balanced_left=data.get("balanced_left"),
        grid=tuple(grid) if grid is not None else None,
        threads=int(data.get("threads", 1)),
    )


def run_experiment_config(config: dict) -> ExperimentReport:
    """Dispatch a structured experiment description to its runner."""
    try:
        kind = config["experiment"]
        n_seeds = int(config.get("n_seeds", 100))
        seed = int(config["seed"])
    except KeyError as err:
        raise ValueError(f"experiment config missing required key: {err}") from err

    if kind == "hl-ols-equivalence":
        return run_equivalence_check(n_instances=n_seeds, seed=seed)

    spec = dgp_from_dict(config["dgp"])
    inference = inference_config_from_dict(config.get("inference", {}))
    if kind == "size":
        return run_size_experiment(
            spec, inference, n_seeds, alpha=float(config.get("alpha", 0.05)), seed=seed
        )
    if kind == "coverage":
        return run_coverage_experiment(
            spec, inference, n_seeds, level=float(config.get("level", 0.95)), seed=seed
        )
    if kind == "fwer":
        return run_fwer_experiment(
            spec,
            config["candidates"],
            n_seeds,
            alpha_balance=float(config.get("alpha_balance", 0.1)),
            seed=seed,
        )
    if kind == "residual-equality":
        return run_residual_equality_check(spec, inference, n_seeds, seed=seed)
    raise ValueError(f"unknown experiment kind {kind!r}")
