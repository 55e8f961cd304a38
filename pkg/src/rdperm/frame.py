"""Unit-level data: the analysis table, treatment derivation, and windows.

A :class:`UnitFrame` holds the running variable, the outcome, named
covariates, and the treatment indicator derived from the cutoff rule.
A :class:`WindowSpec` describes a bandwidth interval around the cutoff
together with an exclusion set; :func:`realize_window` turns it into the
index set of units inside the window.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .exceptions import (
    DegenerateWindowError,
    EmptyFrameError,
    MissingColumnError,
    NonNumericCellError,
)
from .validation import as_float_vector, check_same_length

logger = logging.getLogger(__name__)

CONTINUOUS = "continuous"
BINARY = "binary"


class Direction(enum.Enum):
    """Which side of the cutoff is assigned to treatment.

    ``TREATED_AT_OR_BELOW`` puts units with ``running <= cutoff`` in the
    treated arm (ties go to treatment); ``TREATED_ABOVE`` treats
    ``running > cutoff``.
    """

    TREATED_AT_OR_BELOW = "below"
    TREATED_ABOVE = "above"

    @classmethod
    def from_string(cls, label: str) -> "Direction":
        for member in cls:
            if member.value == label:
                return member
        raise ValueError(f"unknown treatment direction {label!r}; use 'below' or 'above'")


def treatment_indicator(running: np.ndarray, cutoff: float, direction: Direction) -> np.ndarray:
    """Derive the 0/1 treatment vector from the cutoff rule."""
    if direction is Direction.TREATED_AT_OR_BELOW:
        return (running <= cutoff).astype(np.int8)
    return (running > cutoff).astype(np.int8)


@dataclass(frozen=True)
class Covariate:
    """A named covariate column with its measurement kind."""

    values: np.ndarray
    kind: str = CONTINUOUS

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, BINARY):
            raise ValueError(f"covariate kind must be continuous or binary, got {self.kind!r}")
        values = np.asarray(self.values, dtype=float)
        if self.kind == BINARY:
            uniq = np.unique(values)
            if not np.all(np.isin(uniq, (0.0, 1.0))):
                raise ValueError("binary covariate contains values outside {0, 1}")
        elif not np.all(np.isfinite(values)):
            raise ValueError("continuous covariate contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


def infer_covariate_kind(values: np.ndarray) -> str:
    """Classify a column as binary iff every value is 0 or 1."""
    return BINARY if np.all(np.isin(np.unique(values), (0.0, 1.0))) else CONTINUOUS


@dataclass(frozen=True)
class UnitFrame:
    """Immutable table of analysis units.

    Parameters
    ----------
    running : array
        Running-variable values, one per unit.
    outcome : array
        Outcome values, same length.
    cutoff : float
        Threshold of the running variable that flips treatment.
    direction : Direction
        Which side of the cutoff is treated.
    covariates : dict
        Mapping of covariate name to :class:`Covariate`.

    The treatment vector is derived from ``running``, ``cutoff`` and
    ``direction`` at construction and revalidated on every derived frame,
    so it can never disagree with the assignment rule.
    """

    running: np.ndarray
    outcome: np.ndarray
    cutoff: float
    direction: Direction
    covariates: dict[str, Covariate] = field(default_factory=dict)
    treated: np.ndarray = field(init=False)

    def __post_init__(self):
        running = as_float_vector(self.running, "running")
        outcome = as_float_vector(self.outcome, "outcome")
        n = check_same_length(("running", running), ("outcome", outcome))
        if n == 0:
            raise EmptyFrameError("frame has no rows")
        for name, cov in self.covariates.items():
            if len(cov.values) != n:
                raise ValueError(f"covariate {name!r} has length {len(cov.values)}, expected {n}")
        running.setflags(write=False)
        outcome.setflags(write=False)
        z = treatment_indicator(running, self.cutoff, self.direction)
        z.setflags(write=False)
        object.__setattr__(self, "running", running)
        object.__setattr__(self, "outcome", outcome)
        object.__setattr__(self, "treated", z)

    @property
    def n(self) -> int:
        return len(self.running)

    @property
    def n_treated(self) -> int:
        return int(self.treated.sum())

    @property
    def n_control(self) -> int:
        return self.n - self.n_treated

    @property
    def centered_running(self) -> np.ndarray:
        """Running variable with the cutoff subtracted."""
        return self.running - self.cutoff

    def covariate_values(self, name: str) -> np.ndarray:
        try:
            return self.covariates[name].values
        except KeyError:
            raise KeyError(f"no covariate named {name!r}") from None

    def center(self) -> "UnitFrame":
        """Return a frame with the cutoff subtracted from ``running`` and reset to 0."""
        return UnitFrame(
            running=self.running - self.cutoff,
            outcome=self.outcome,
            cutoff=0.0,
            direction=self.direction,
            covariates=self.covariates,
        )

    def subset(self, indices: np.ndarray) -> "UnitFrame":
        """Return a new frame restricted to ``indices`` (treatment re-derived)."""
        indices = np.asarray(indices, dtype=int)
        return UnitFrame(
            running=self.running[indices],
            outcome=self.outcome[indices],
            cutoff=self.cutoff,
            direction=self.direction,
            covariates={
                name: Covariate(cov.values[indices], cov.kind)
                for name, cov in self.covariates.items()
            },
        )


@dataclass(frozen=True)
class WindowSpec:
    """A bandwidth interval around the cutoff plus an exclusion set.

    ``left`` and ``right`` are nonnegative bandwidths in running-variable
    units. ``exclusions`` contains entries expressed relative to the
    cutoff: a plain float removes units whose centered running value
    matches it (within ``tolerance``, default exact), and a ``(lo, hi)``
    pair removes the closed interval ``[lo, hi]``.
    """

    left: float
    right: float
    exclusions: tuple = ()
    label: str = ""
    tolerance: float = 0.0

    def __post_init__(self):
        if self.left < 0 or self.right < 0:
            raise ValueError("window bandwidths must be nonnegative")
        if self.tolerance < 0:
            raise ValueError("tolerance must be nonnegative")
        normalized = []
        for item in self.exclusions:
            if np.isscalar(item):
                normalized.append(float(item))
            else:
                lo, hi = item
                if hi < lo:
                    raise ValueError(f"exclusion interval ({lo}, {hi}) is reversed")
                normalized.append((float(lo), float(hi)))
        object.__setattr__(self, "exclusions", tuple(normalized))

    def with_exclusions(self, extra, label: str | None = None) -> "WindowSpec":
        """Return a copy with additional exclusion entries appended."""
        return replace(
            self,
            exclusions=self.exclusions + tuple(extra),
            label=self.label if label is None else label,
        )

    def exclusion_mask(self, centered: np.ndarray) -> np.ndarray:
        """Boolean mask of units removed by the exclusion set."""
        mask = np.zeros(len(centered), dtype=bool)
        for item in self.exclusions:
            if isinstance(item, tuple):
                lo, hi = item
                mask |= (centered >= lo) & (centered <= hi)
            elif self.tolerance > 0:
                mask |= np.abs(centered - item) <= self.tolerance
            else:
                mask |= centered == item
        return mask


def full_window(frame: UnitFrame, label: str = "full") -> WindowSpec:
    """A window wide enough to contain every unit of ``frame``."""
    centered = frame.centered_running
    return WindowSpec(
        left=max(0.0, float(-centered.min())),
        right=max(0.0, float(centered.max())),
        label=label,
    )


def realize_window(frame: UnitFrame, window: WindowSpec, enforce: bool = True) -> np.ndarray:
    """Return the sorted unit indices inside ``window``.

    With ``enforce`` (the default, and what every downstream test uses)
    the window must keep at least 2 treated and 2 control units; pass
    ``enforce=False`` to inspect membership of a window that may be too
    thin to analyze.

    Raises
    ------
    DegenerateWindowError
        If ``enforce`` and fewer than 2 treated or 2 control units remain.
    """
    centered = frame.centered_running
    inside = (centered >= -window.left) & (centered <= window.right)
    inside &= ~window.exclusion_mask(centered)
    indices = np.flatnonzero(inside)
    if enforce:
        n_treated = int(frame.treated[indices].sum())
        n_control = len(indices) - n_treated
        if n_treated < 2 or n_control < 2:
            raise DegenerateWindowError(
                f"window {window.label or (window.left, window.right)} keeps "
                f"{n_treated} treated and {n_control} control units; need 2 of each"
            )
    return indices


def window_counts(frame: UnitFrame, indices: np.ndarray) -> tuple[int, int, int]:
    """(n, n_treated, n_control) for a realized index set."""
    n = len(indices)
    n_treated = int(frame.treated[indices].sum())
    return n, n_treated, n - n_treated


def _numeric_column(raw: pd.Series, column: str) -> np.ndarray:
    values = pd.to_numeric(raw, errors="coerce")
    bad = values.isna() & raw.notna() & (raw.astype(str).str.strip() != "")
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise NonNumericCellError(row=row, column=column, value=str(raw.iloc[row]))
    return values.to_numpy(dtype=float)


def load_frame(
    path,
    schema: dict,
    cutoff: float,
    direction: Direction | str,
    center: bool = False,
    covariate_kinds: dict[str, str] | None = None,
) -> UnitFrame:
    """Load a CSV file into a validated :class:`UnitFrame`.

    Parameters
    ----------
    path : str or Path
        CSV file with a header row, UTF-8, '.' decimal separator.
    schema : dict
        Column mapping with keys ``running``, ``outcome`` and optional
        ``covariates`` (list of column names).
    cutoff, direction
        Treatment assignment rule. ``direction`` may be a
        :class:`Direction` or one of ``"below"``/``"above"``.
    center : bool
        If true, subtract the cutoff from the running variable and reset
        the cutoff to 0.
    covariate_kinds : dict, optional
        Force ``"binary"``/``"continuous"`` per covariate name; anything
        not listed is inferred (all values in {0,1} means binary).

    Rows with a missing value in any requested covariate are dropped and
    the count is logged; missing running or outcome cells are an error.
    """
    if isinstance(direction, str):
        direction = Direction.from_string(direction)
    table = pd.read_csv(path, dtype=str, encoding="utf-8", skipinitialspace=True)
    if table.shape[0] == 0:
        raise EmptyFrameError(f"{path} contains no data rows")

    running_col = schema["running"]
    outcome_col = schema["outcome"]
    covariate_cols = list(schema.get("covariates", ()))
    for column in [running_col, outcome_col, *covariate_cols]:
        if column not in table.columns:
            raise MissingColumnError(f"column {column!r} not found in {path}")

    running = _numeric_column(table[running_col], running_col)
    outcome = _numeric_column(table[outcome_col], outcome_col)
    for label, values in (("running", running), ("outcome", outcome)):
        if np.isnan(values).any():
            row = int(np.flatnonzero(np.isnan(values))[0])
            column = running_col if label == "running" else outcome_col
            raise NonNumericCellError(row=row, column=column, value="<missing>")

    covariate_data = {c: _numeric_column(table[c], c) for c in covariate_cols}
    keep = np.ones(len(running), dtype=bool)
    for values in covariate_data.values():
        keep &= ~np.isnan(values)
    dropped = int((~keep).sum())
    if dropped:
        logger.warning("dropped %d rows with missing covariate values", dropped)
    if not keep.any():
        raise EmptyFrameError("every row was dropped for missing covariate values")

    kinds = covariate_kinds or {}
    covariates = {}
    for name, values in covariate_data.items():
        values = values[keep]
        kind = kinds.get(name) or infer_covariate_kind(values)
        covariates[name] = Covariate(values, kind)

    frame = UnitFrame(
        running=running[keep],
        outcome=outcome[keep],
        cutoff=float(cutoff),
        direction=direction,
        covariates=covariates,
    )
    return frame.center() if center else frame
