"""Randomization-based inference for regression discontinuity designs."""

from .detrend import (
    FittedModel,
    ModelFamily,
    ModelSpec,
    ResponseTransform,
    fit_model,
    hat_residuals,
)
from .frame import (
    Covariate,
    Direction,
    UnitFrame,
    WindowSpec,
    full_window,
    load_frame,
    realize_window,
    window_counts,
)
from .inference import (
    EffectHypothesis,
    EffectInference,
    default_grid,
    hl_estimate,
    invert_ci,
    test_effect,
)
from .permutation import (
    PermutationPlan,
    Sidedness,
    StatKind,
    Statistic,
    TestResult,
    null_expectation,
    permutation_test,
)

__version__ = "0.1.0"

__all__ = [
    "Covariate",
    "Direction",
    "EffectHypothesis",
    "EffectInference",
    "FittedModel",
    "ModelFamily",
    "ModelSpec",
    "PermutationPlan",
    "ResponseTransform",
    "Sidedness",
    "StatKind",
    "Statistic",
    "TestResult",
    "UnitFrame",
    "WindowSpec",
    "default_grid",
    "fit_model",
    "full_window",
    "hat_residuals",
    "hl_estimate",
    "invert_ci",
    "load_frame",
    "null_expectation",
    "permutation_test",
    "realize_window",
    "test_effect",
    "window_counts",
    "__version__",
]
