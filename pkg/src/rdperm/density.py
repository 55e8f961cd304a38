"""Density discontinuity test at the cutoff (manipulation check).

Counts of the running variable are binned so that no bin straddles the
cutoff (discrete running variables use their support points directly),
normalized to density heights, and smoothed by triangular-kernel local
linear regressions fit separately on each side and evaluated at the
cutoff boundary. The test statistic is the difference of the log
boundary densities with the cited large-sample standard error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .exceptions import EmptySideError, InsufficientBinsError
from .frame import UnitFrame, WindowSpec, full_window, realize_window

#: Minimum bins per side demanded before fitting.
MIN_BINS_PER_SIDE = 10

#: Constant of the cited plug-in bandwidth rule (triangular kernel,
#: boundary local linear regression).
PLUGIN_KAPPA = 3.348

#: A running variable is treated as discrete when its in-window support
#: is this much smaller than the sample.
DISCRETE_SUPPORT_FRACTION = 0.2


@dataclass
class BinRow:
    midpoint: float
    count: int
    height: float
    side: str


@dataclass
class McCraryResult:
    """Density discontinuity estimate at the cutoff.

    ``theta`` is ``log f_above(c) - log f_below(c)``; ``p_value`` is the
    two-sided Normal p and is ``None`` when a boundary density estimate
    is non-positive (see ``notes``).
    """

    bin_width: float
    bandwidth: float
    theta: float
    se: float
    p_value: float | None
    bin_table: list[BinRow]
    n: int
    f_below: float
    f_above: float
    discrete: bool
    notes: list[str] = field(default_factory=list)


def _excluded_intervals(window: WindowSpec | None, cutoff: float) -> list[tuple[float, float]]:
    if window is None:
        return []
    zones = []
    for item in window.exclusions:
        if isinstance(item, tuple):
            zones.append((cutoff + item[0], cutoff + item[1]))
        elif window.tolerance > 0:
            zones.append((cutoff + item - window.tolerance, cutoff + item + window.tolerance))
        # Zero-width value exclusions remove at most an atom; for
        # continuous bins the bin itself stays representative.
    return zones


def _overlaps(lo: float, hi: float, zones: list[tuple[float, float]]) -> bool:
    return any(hi >= zlo and lo <= zhi for zlo, zhi in zones)


def _continuous_bins(running, cutoff, bin_width, zones):
    below = running[running <= cutoff]
    above = running[running > cutoff]
    if len(below) == 0:
        raise EmptySideError("no units at or below the cutoff")
    if len(above) == 0:
        raise EmptySideError("no units above the cutoff")
    rows: list[BinRow] = []
    n_binned = 0
    for side, values in (("below", below), ("above", above)):
        offsets = (cutoff - values) if side == "below" else (values - cutoff)
        # Below bins are (c-jb, c-(j-1)b], so the cutoff itself lands in
        # the first below bin; above bins are (c+(j-1)b, c+jb].
        if side == "below":
            j = np.floor(offsets / bin_width).astype(int) + 1
        else:
            j = np.maximum(np.ceil(offsets / bin_width).astype(int), 1)
        j_max = int(j.max())
        counts = np.bincount(j, minlength=j_max + 1)[1:]
        sign = -1.0 if side == "below" else 1.0
        for k in range(1, j_max + 1):
            mid = cutoff + sign * (k - 0.5) * bin_width
            lo, hi = mid - bin_width / 2, mid + bin_width / 2
            if _overlaps(lo, hi, zones):
                continue
            rows.append(BinRow(mid, int(counts[k - 1]), 0.0, side))
            n_binned += int(counts[k - 1])
    for row in rows:
        row.height = row.count / (n_binned * bin_width)
    return rows, n_binned


def _discrete_bins(running, cutoff, zones):
    support, counts = np.unique(running, return_counts=True)
    spacing = float(np.median(np.diff(support))) if len(support) > 1 else 1.0
    rows: list[BinRow] = []
    n_binned = 0
    for point, count in zip(support, counts):
        if _overlaps(point, point, zones):
            continue
        side = "below" if point <= cutoff else "above"
        rows.append(BinRow(float(point), int(count), 0.0, side))
        n_binned += int(count)
    for row in rows:
        row.height = row.count / (n_binned * spacing)
    return rows, n_binned, spacing


def _boundary_points(cutoff: float, zones: list[tuple[float, float]]) -> tuple[float, float]:
    """Evaluation points per side: the cutoff, pushed outward past any
    excised zone that covers it.

    Extrapolating a boundary fit across a hole around the cutoff blows
    up its variance far beyond the plug-in standard error, so each side
    is evaluated at the edge of its own data instead.
    """
    eval_below = eval_above = cutoff
    for lo, hi in zones:
        if lo <= eval_below and hi >= eval_below:
            eval_below = lo
        if lo <= eval_above and hi >= eval_above:
            eval_above = hi
    return eval_below, eval_above


def _boundary_fit(rows: list[BinRow], at: float, bandwidth: float, side: str) -> float:
    mids = np.array([r.midpoint for r in rows if r.side == side])
    heights = np.array([r.height for r in rows if r.side == side])
    dist = np.abs(mids - at)
    weights = np.clip(1.0 - dist / bandwidth, 0.0, None)
    positive = weights > 0
    if positive.sum() < 2:
        raise InsufficientBinsError(side, int(positive.sum()), 2)
    x = mids[positive] - at
    w = weights[positive]
    y = heights[positive]
    design = np.column_stack([np.ones(len(x)), x])
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(design * sw[:, None], y * sw, rcond=None)
    return float(coef[0])


def _plugin_bandwidth(rows, cutoff, side, fallback_span):
    mids = np.array([r.midpoint for r in rows if r.side == side])
    heights = np.array([r.height for r in rows if r.side == side])
    span = float(mids.max() - mids.min()) if len(mids) > 1 else fallback_span
    if len(mids) < 6:
        return fallback_span
    x = mids - cutoff
    design = np.column_stack([x**k for k in range(5)])
    coef, *_ = np.linalg.lstsq(design, heights, rcond=None)
    fitted = design @ coef
    sigma2 = float(np.mean((heights - fitted) ** 2))
    second = 2 * coef[2] + 6 * coef[3] * x + 12 * coef[4] * x**2
    curvature = float(np.sum(second**2))
    if curvature <= 0 or sigma2 <= 0:
        return fallback_span
    return PLUGIN_KAPPA * (sigma2 * span / curvature) ** 0.2


def mccrary_test(
    frame: UnitFrame,
    window: WindowSpec | None = None,
    bin_width: float | None = None,
    bandwidth: float | None = None,
    discrete: bool | None = None,
) -> McCraryResult:
    """Test for a discontinuity of the running-variable density at the cutoff.

    Parameters
    ----------
    window : WindowSpec, optional
        Restrict to this window; its interval exclusions are carved out
        of the binned domain so excised regions do not read as zero
        density.
    bin_width, bandwidth : float, optional
        First-stage histogram bin width (default ``2 * sd(r) * n**-0.5``)
        and smoothing bandwidth (default: per-side plug-in from a quartic
        pilot fit, averaged and clamped to the data span). Always
        overridable.
    discrete : bool, optional
        Force the discrete (support points as bins) path; by default the
        variable is discrete when its support is much smaller than the
        sample.
    """
    if window is None:
        window = full_window(frame)
    idx = realize_window(frame, window, enforce=False)
    running = frame.running[idx]
    if len(running) == 0:
        raise EmptySideError("window contains no units")
    cutoff = frame.cutoff
    zones = _excluded_intervals(window, cutoff)
    notes: list[str] = []

    support_size = len(np.unique(running))
    if discrete is None:
        discrete = support_size <= max(4, int(DISCRETE_SUPPORT_FRACTION * len(running)))

    if discrete:
        rows, n_binned, spacing = _discrete_bins(running, cutoff, zones)
        used_bin_width = spacing if bin_width is None else float(bin_width)
    else:
        if bin_width is None:
            used_bin_width = 2.0 * float(np.std(running)) * len(running) ** -0.5
        else:
            used_bin_width = float(bin_width)
        if used_bin_width <= 0:
            raise ValueError("bin width must be positive")
        rows, n_binned = _continuous_bins(running, cutoff, used_bin_width, zones)

    for side in ("below", "above"):
        n_side = sum(1 for r in rows if r.side == side)
        if n_side == 0:
            raise EmptySideError(f"no bins {side} the cutoff")
        if n_side < MIN_BINS_PER_SIDE:
            raise InsufficientBinsError(side, n_side, MIN_BINS_PER_SIDE)

    if bandwidth is None:
        mids = np.array([r.midpoint for r in rows])
        spans = (
            cutoff - float(mids.min()),
            float(mids.max()) - cutoff,
        )
        h_below = _plugin_bandwidth(rows, cutoff, "below", spans[0])
        h_above = _plugin_bandwidth(rows, cutoff, "above", spans[1])
        used_bandwidth = min(0.5 * (h_below + h_above), max(spans))
        used_bandwidth = max(used_bandwidth, 3.0 * used_bin_width)
    else:
        used_bandwidth = float(bandwidth)
        if used_bandwidth <= 0:
            raise ValueError("bandwidth must be positive")

    eval_below, eval_above = _boundary_points(cutoff, zones)
    f_below = _boundary_fit(rows, eval_below, used_bandwidth, "below")
    f_above = _boundary_fit(rows, eval_above, used_bandwidth, "above")

    if f_below <= 0 or f_above <= 0:
        notes.append(
            "boundary density estimate non-positive; log discontinuity undefined"
        )
        return McCraryResult(
            bin_width=used_bin_width,
            bandwidth=used_bandwidth,
            theta=math.nan,
            se=math.nan,
            p_value=None,
            bin_table=rows,
            n=n_binned,
            f_below=f_below,
            f_above=f_above,
            discrete=bool(discrete),
            notes=notes,
        )

    theta = math.log(f_above) - math.log(f_below)
    se = math.sqrt(24.0 / 5.0 * (1.0 / f_above + 1.0 / f_below) / (n_binned * used_bandwidth))
    p_value = float(2.0 * norm.sf(abs(theta) / se))
    return McCraryResult(
        bin_width=used_bin_width,
        bandwidth=used_bandwidth,
        theta=theta,
        se=se,
        p_value=p_value,
        bin_table=rows,
        n=n_binned,
        f_below=f_below,
        f_above=f_above,
        discrete=bool(discrete),
        notes=notes,
    )


def bin_table_rows(result: McCraryResult) -> list[dict]:
    """Bin table as plain dicts, ready for CSV export."""
    return [
        {
            "midpoint": row.midpoint,
            "count": row.count,
            "height": row.height,
            "side": row.side,
        }
        for row in result.bin_table
    ]
