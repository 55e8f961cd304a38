"""De-trending models: fit outcomes or covariates against the running variable.

The families are an intercept-only fit, polynomials in the running
variable of degree 1 and 2 (all by least squares), and a logistic
regression for binary responses. Each fit exposes residuals on the
response scale; the least-squares families additionally expose the
residual-maker ``v -> (I - H) v`` needed for closed-form estimation.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .exceptions import (
    NonConvergenceError,
    RankDeficientDesignError,
    SeparationDetectedError,
)
from .validation import as_float_vector, check_same_length

LOGIT_CLAMP = 1e-4
IRLS_TOL = 1e-10
IRLS_MAX_ITER = 100
SEPARATION_ETA = 30.0


class ModelFamily(enum.Enum):
    CONSTANT = "constant"
    LINEAR = "linear"
    QUADRATIC = "quadratic"
    LOGISTIC = "logistic"

    @classmethod
    def from_string(cls, label: str) -> "ModelFamily":
        for member in cls:
            if member.value == label:
                return member
        raise ValueError(f"unknown model family {label!r}")


class ResponseTransform(enum.Enum):
    IDENTITY = "identity"
    LOGIT = "logit"


#: Families fit by ordinary least squares (hat matrix available).
OLS_FAMILIES = (ModelFamily.CONSTANT, ModelFamily.LINEAR, ModelFamily.QUADRATIC)


@dataclass(frozen=True)
class ModelSpec:
    """Family plus optional pre-transform of the response.

    The logit transform is meant for responses bounded in (0, 1) such as
    percentile ranks; values are clamped to ``[1e-4, 1 - 1e-4]`` before
    transforming. The logistic family requires a 0/1 response.
    """

    family: ModelFamily = ModelFamily.LINEAR
    transform: ResponseTransform = ResponseTransform.IDENTITY

    def __post_init__(self):
        if self.family is ModelFamily.LOGISTIC and self.transform is not ResponseTransform.IDENTITY:
            raise ValueError("logistic family does not compose with a response transform")

    @property
    def is_ols(self) -> bool:
        return self.family in OLS_FAMILIES

    def describe(self) -> str:
        base = self.family.value
        if self.transform is ResponseTransform.LOGIT:
            return f"logit-{base}"
        return base


@dataclass(frozen=True)
class FittedModel:
    """Result of fitting a :class:`ModelSpec`.

    ``coef`` is on the original running-variable scale (the quadratic
    family is fit on internally standardized powers for conditioning and
    back-transformed). ``residuals`` are on the (possibly transformed)
    response scale; for the logistic family they are ``v - p_hat``.
    """

    spec: ModelSpec
    coef: np.ndarray
    residuals: np.ndarray
    design_info: str
    hat_available: bool
    converged: bool = True


def _design_matrix(family: ModelFamily, running: np.ndarray) -> tuple[np.ndarray, str]:
    if family is ModelFamily.CONSTANT:
        return np.ones((len(running), 1)), "1"
    if family in (ModelFamily.LINEAR, ModelFamily.LOGISTIC):
        return np.column_stack([np.ones(len(running)), running]), "1 + r"
    if family is ModelFamily.QUADRATIC:
        # Standardize before squaring so the columns stay well conditioned.
        center = running.mean()
        scale = running.std()
        if scale == 0.0:
            scale = 1.0
        s = (running - center) / scale
        return np.column_stack([np.ones(len(running)), s, s**2]), "1 + r + r^2 (standardized)"
    raise ValueError(f"unsupported family {family}")


def _quadratic_original_scale(coef_std: np.ndarray, running: np.ndarray) -> np.ndarray:
    # Undo s = (r - m) / c: expand a0 + a1 s + a2 s^2 in powers of r.
    m = running.mean()
    c = running.std() or 1.0
    a0, a1, a2 = coef_std
    return np.array(
        [a0 - a1 * m / c + a2 * m**2 / c**2, a1 / c - 2 * a2 * m / c**2, a2 / c**2]
    )


def _check_rank(design: np.ndarray, weights: np.ndarray | None = None) -> None:
    work = design if weights is None else design * np.sqrt(weights)[:, None]
    if np.linalg.matrix_rank(work) < design.shape[1]:
        raise RankDeficientDesignError(
            f"design with columns [{design.shape[1]}] is rank deficient "
            "(is the running variable constant in this window?)"
        )


def _ols(design: np.ndarray, response: np.ndarray, weights: np.ndarray | None):
    _check_rank(design, weights)
    if weights is None:
        coef, *_ = np.linalg.lstsq(design, response, rcond=None)
    else:
        sw = np.sqrt(weights)
        coef, *_ = np.linalg.lstsq(design * sw[:, None], response * sw, rcond=None)
    return coef, response - design @ coef


def _logit_transform(values: np.ndarray) -> np.ndarray:
    clamped = np.clip(values, LOGIT_CLAMP, 1.0 - LOGIT_CLAMP)
    return np.log(clamped / (1.0 - clamped))


def _irls_logistic(design: np.ndarray, response: np.ndarray) -> np.ndarray:
    _check_rank(design)
    classes = np.unique(response)
    if not np.all(np.isin(classes, (0.0, 1.0))):
        raise ValueError("logistic family requires a 0/1 response")
    if len(classes) < 2:
        raise ValueError("logistic family requires both classes present")
    beta = np.zeros(design.shape[1])
    for _ in range(IRLS_MAX_ITER):
        eta = design @ beta
        if np.max(np.abs(eta)) > SEPARATION_ETA:
            raise SeparationDetectedError(
                "fitted logits diverged; classes appear separated by the running variable"
            )
        prob = expit(eta)
        grad = design.T @ (response - prob)
        if np.max(np.abs(grad)) <= IRLS_TOL:
            return beta
        w = np.clip(prob * (1.0 - prob), 1e-10, None)
        hessian = design.T @ (design * w[:, None])
        try:
            step = np.linalg.solve(hessian, grad)
        except np.linalg.LinAlgError as err:
            raise RankDeficientDesignError(str(err)) from err
        beta = beta + step
    raise NonConvergenceError(
        f"logistic fit did not reach gradient norm {IRLS_TOL} in {IRLS_MAX_ITER} iterations"
    )


def fit_model(
    spec: ModelSpec,
    running,
    response,
    weights=None,
) -> FittedModel:
    """Fit ``spec`` on ``(running, response)`` and return residuals.

    Least-squares families are solved by orthogonal decomposition; the
    logistic family by iteratively reweighted least squares to gradient
    norm 1e-10. ``weights`` (least-squares families only) supports
    kernel-weighted local fits.

    Raises
    ------
    RankDeficientDesignError
        Collinear design, e.g. a constant running variable under the
        linear family.
    SeparationDetectedError, NonConvergenceError
        Logistic pathologies; callers that can tolerate them may fall
        back to a linear-probability fit.
    """
    running = as_float_vector(running, "running")
    response = as_float_vector(response, "response")
    check_same_length(("running", running), ("response", response))
    if weights is not None:
        weights = as_float_vector(weights, "weights")
        check_same_length(("running", running), ("weights", weights))
        if np.any(weights < 0):
            raise ValueError("weights must be nonnegative")

    if spec.transform is ResponseTransform.LOGIT:
        response = _logit_transform(response)

    design, info = _design_matrix(spec.family, running)
    if len(response) < design.shape[1] + 1:
        raise ValueError(
            f"need at least {design.shape[1] + 1} observations to fit {spec.describe()}"
        )

    if spec.family is ModelFamily.LOGISTIC:
        if weights is not None:
            raise ValueError("weights are not supported for the logistic family")
        beta = _irls_logistic(design, response)
        residuals = response - expit(design @ beta)
        return FittedModel(spec, beta, residuals, info, hat_available=False)

    coef, residuals = _ols(design, response, weights)
    if spec.family is ModelFamily.QUADRATIC:
        coef = _quadratic_original_scale(coef, running)
    return FittedModel(spec, coef, residuals, info, hat_available=True)


def hat_residuals(spec: ModelSpec, running, values) -> np.ndarray:
    """Apply the residual maker ``(I - H)`` of an OLS design to ``values``.

    The design is built from ``running`` per ``spec.family``; the result
    is linear and idempotent in ``values``. Only least-squares families
    carry a hat matrix.
    """
    if not spec.is_ols:
        raise ValueError(f"{spec.describe()} has no hat-matrix form")
    running = as_float_vector(running, "running")
    values = as_float_vector(values, "values")
    check_same_length(("running", running), ("values", values))
    design, _ = _design_matrix(spec.family, running)
    _check_rank(design)
    q, _ = np.linalg.qr(design)
    return values - q @ (q.T @ values)
