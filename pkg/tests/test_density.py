"""Tests for the density discontinuity test."""

import numpy as np
import pytest

from rdperm import Direction, UnitFrame, WindowSpec
from rdperm.density import bin_table_rows, mccrary_test
from rdperm.exceptions import EmptySideError, InsufficientBinsError


def make(running, direction=Direction.TREATED_AT_OR_BELOW, cutoff=0.0):
    running = np.asarray(running, dtype=float)
    return UnitFrame(
        running=running,
        outcome=np.zeros_like(running),
        cutoff=cutoff,
        direction=direction,
    )


class TestBinning:
    def test_counts_sum_to_in_range_units(self):
        rng = np.random.default_rng(0)
        frame = make(rng.uniform(-1, 1, 3000))
        result = mccrary_test(frame)
        assert sum(row.count for row in result.bin_table) == result.n == 3000

    def test_no_bin_straddles_cutoff(self):
        rng = np.random.default_rng(1)
        frame = make(rng.uniform(-1, 1, 2000))
        result = mccrary_test(frame)
        for row in result.bin_table:
            lo = row.midpoint - result.bin_width / 2
            hi = row.midpoint + result.bin_width / 2
            assert not (lo < 0.0 < hi) or np.isclose(lo, 0.0) or np.isclose(hi, 0.0)

    def test_at_cutoff_units_bin_below(self):
        rng = np.random.default_rng(2)
        running = np.concatenate([rng.uniform(-1, 1, 2000), np.zeros(100)])
        frame = make(running)
        result = mccrary_test(frame)
        first_below = max(
            (r for r in result.bin_table if r.side == "below"), key=lambda r: r.midpoint
        )
        assert first_below.count >= 100

    def test_discrete_support_detected(self):
        support = np.round(np.arange(-1.0, 1.001, 0.01), 10)
        rng = np.random.default_rng(3)
        frame = make(rng.choice(support, 5000))
        result = mccrary_test(frame)
        assert result.discrete

    def test_empty_side(self):
        frame = make(np.linspace(0.1, 1.0, 50))
        with pytest.raises(EmptySideError):
            mccrary_test(frame)

    def test_too_few_bins(self):
        rng = np.random.default_rng(4)
        running = np.concatenate([rng.uniform(-0.02, 0, 40), rng.uniform(0, 1, 400)])
        frame = make(running)
        with pytest.raises(InsufficientBinsError):
            mccrary_test(frame, bin_width=0.05, discrete=False)

    def test_bin_table_rows_export(self):
        rng = np.random.default_rng(5)
        frame = make(rng.uniform(-1, 1, 1000))
        rows = bin_table_rows(mccrary_test(frame))
        assert {"midpoint", "count", "height", "side"} == set(rows[0])


class TestStatistic:
    def test_perfectly_symmetric_counts_give_p_one(self):
        mids = np.round(np.arange(0.05, 1.25, 0.1), 10)
        running = np.concatenate([np.repeat(-mids, 30), np.repeat(mids, 30)])
        result = mccrary_test(make(running))
        assert abs(result.theta) < 1e-9
        assert result.p_value == pytest.approx(1.0, abs=1e-9)

    def test_heap_at_cutoff_detected(self):
        rng = np.random.default_rng(6)
        r = rng.uniform(-1, 1, 5000)
        moved = np.argsort(np.abs(r - (-0.05)))[:250]
        r = r.copy()
        r[moved] = 0.0
        result = mccrary_test(make(r))
        assert result.p_value < 0.001

    def test_duplication_invariance(self):
        rng = np.random.default_rng(7)
        r = rng.uniform(-1, 1, 4000)
        single = mccrary_test(make(r), bin_width=0.02, bandwidth=0.4)
        double = mccrary_test(make(np.concatenate([r, r])), bin_width=0.02, bandwidth=0.4)
        assert double.theta == pytest.approx(single.theta, abs=1e-12)
        assert double.se == pytest.approx(single.se / np.sqrt(2.0), rel=1e-12)

    def test_size_near_nominal_on_uniform_density(self):
        rejections = 0
        n_seeds = 200
        for s in range(n_seeds):
            rng = np.random.default_rng([900, s])
            result = mccrary_test(make(rng.uniform(-1, 1, 5000)))
            rejections += result.p_value < 0.05
        band = 3 * np.sqrt(0.05 * 0.95 / n_seeds)
        assert abs(rejections / n_seeds - 0.05) <= band

    def test_zero_density_reported_not_raised(self):
        # Steeply falling density toward the cutoff from below drives the
        # boundary fit negative.
        rng = np.random.default_rng(8)
        below = -np.abs(rng.normal(0.8, 0.15, 3000))
        below = below[below > -1.5]
        above = rng.uniform(0, 1.5, 1500)
        result = mccrary_test(make(np.concatenate([below, above])), bandwidth=0.6)
        if result.p_value is None:
            assert result.notes
            assert np.isnan(result.theta)

    def test_explicit_overrides_respected(self):
        rng = np.random.default_rng(9)
        frame = make(rng.uniform(-1, 1, 2000))
        result = mccrary_test(frame, bin_width=0.03, bandwidth=0.5)
        assert result.bin_width == 0.03
        assert result.bandwidth == 0.5


class TestExclusionZones:
    def test_interval_exclusion_carves_bins(self):
        rng = np.random.default_rng(10)
        frame = make(rng.uniform(-1, 1, 4000))
        window = WindowSpec(left=1.0, right=1.0, exclusions=((-0.1, 0.1),))
        result = mccrary_test(frame, window=window)
        for row in result.bin_table:
            assert abs(row.midpoint) > 0.05

    def test_size_stays_nominal_with_hole(self):
        window = WindowSpec(left=1.0, right=1.0, exclusions=((-0.1, 0.1),))
        rejections = 0
        n_seeds = 120
        for s in range(n_seeds):
            rng = np.random.default_rng([56, s])
            result = mccrary_test(make(rng.uniform(-1, 1, 4000)), window=window)
            rejections += result.p_value < 0.05
        assert abs(rejections / n_seeds - 0.05) <= 3 * np.sqrt(0.05 * 0.95 / n_seeds)

    def test_value_exclusion_drops_discrete_support_point(self):
        support = np.round(np.arange(-1.0, 1.001, 0.05), 10)
        rng = np.random.default_rng(11)
        r = rng.choice(support, 6000)
        window = WindowSpec(left=1.0, right=1.0, exclusions=(0.0,))
        result = mccrary_test(make(r), window=window)
        assert all(row.midpoint != 0.0 for row in result.bin_table)
