"""Tests for unit-frame construction, CSV loading, and window realization."""

import numpy as np
import pytest

from rdperm import Covariate, Direction, UnitFrame, WindowSpec, load_frame, realize_window
from rdperm.exceptions import (
    DegenerateWindowError,
    EmptyFrameError,
    MissingColumnError,
    NonNumericCellError,
)
from rdperm.frame import full_window, infer_covariate_kind, window_counts


def make_frame(running, direction=Direction.TREATED_AT_OR_BELOW, cutoff=0.0, outcome=None):
    running = np.asarray(running, dtype=float)
    if outcome is None:
        outcome = np.zeros_like(running)
    return UnitFrame(running=running, outcome=outcome, cutoff=cutoff, direction=direction)


class TestTreatmentDerivation:
    def test_treated_at_or_below(self):
        frame = make_frame([-0.1, 0.0, 0.2])
        assert frame.treated.tolist() == [1, 1, 0]

    def test_treated_above(self):
        frame = make_frame([-0.1, 0.0, 0.2], direction=Direction.TREATED_ABOVE)
        assert frame.treated.tolist() == [0, 0, 1]

    def test_subset_rederives_treatment(self):
        frame = make_frame([-0.5, -0.2, 0.1, 0.4])
        sub = frame.subset(np.array([1, 2]))
        assert sub.treated.tolist() == [1, 0]

    def test_center_resets_cutoff(self):
        frame = make_frame([1.4, 1.5, 1.6], cutoff=1.5)
        centered = frame.center()
        assert centered.cutoff == 0.0
        np.testing.assert_allclose(centered.running, [-0.1, 0.0, 0.1])
        assert centered.treated.tolist() == frame.treated.tolist()

    def test_arrays_are_immutable(self):
        frame = make_frame([0.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            frame.running[0] = 5.0


class TestCovariates:
    def test_kind_inference(self):
        assert infer_covariate_kind(np.array([0.0, 1.0, 1.0])) == "binary"
        assert infer_covariate_kind(np.array([0.0, 0.5, 1.0])) == "continuous"

    def test_binary_validation(self):
        with pytest.raises(ValueError, match="binary"):
            Covariate(np.array([0.0, 2.0]), kind="binary")

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            UnitFrame(
                running=np.array([0.0, 1.0]),
                outcome=np.array([0.0, 1.0]),
                cutoff=0.0,
                direction=Direction.TREATED_AT_OR_BELOW,
                covariates={"x": Covariate(np.array([1.0, 2.0, 3.0]))},
            )


class TestLoadFrame:
    def write_csv(self, tmp_path, text, name="data.csv"):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path

    def test_basic_load_below(self, tmp_path):
        path = self.write_csv(tmp_path, "gpa,next\n-0.1,2.0\n0.0,2.5\n0.2,3.0\n")
        frame = load_frame(path, {"running": "gpa", "outcome": "next"}, 0.0, "below")
        assert frame.treated.tolist() == [1, 1, 0]

    def test_basic_load_above(self, tmp_path):
        path = self.write_csv(tmp_path, "gpa,next\n-0.1,2.0\n0.0,2.5\n0.2,3.0\n")
        frame = load_frame(path, {"running": "gpa", "outcome": "next"}, 0.0, "above")
        assert frame.treated.tolist() == [0, 0, 1]

    def test_non_numeric_outcome_names_row(self, tmp_path):
        rows = "\n".join(["r,y", "0.1,1.0", "0.2,1.1", "0.3,oops", "0.4,1.3", "0.5,1.4", "0.6,1.5"])
        path = self.write_csv(tmp_path, rows + "\n")
        with pytest.raises(NonNumericCellError) as err:
            load_frame(path, {"running": "r", "outcome": "y"}, 0.0, "below")
        assert err.value.row == 2
        assert err.value.column == "y"

    def test_missing_column(self, tmp_path):
        path = self.write_csv(tmp_path, "r,y\n0.1,1.0\n")
        with pytest.raises(MissingColumnError):
            load_frame(path, {"running": "score", "outcome": "y"}, 0.0, "below")

    def test_empty_file(self, tmp_path):
        path = self.write_csv(tmp_path, "r,y\n")
        with pytest.raises(EmptyFrameError):
            load_frame(path, {"running": "r", "outcome": "y"}, 0.0, "below")

    def test_missing_covariate_rows_dropped_with_count(self, tmp_path, caplog):
        text = "r,y,x\n-0.2,1.0,0.5\n-0.1,1.1,\n0.1,1.2,0.7\n0.2,1.3,0.8\n"
        path = self.write_csv(tmp_path, text)
        with caplog.at_level("WARNING"):
            frame = load_frame(
                path,
                {"running": "r", "outcome": "y", "covariates": ["x"]},
                0.0,
                "below",
            )
        assert frame.n == 3
        assert any("dropped 1 rows" in message for message in caplog.messages)

    def test_center_option(self, tmp_path):
        path = self.write_csv(tmp_path, "r,y\n1.4,1.0\n1.6,2.0\n1.5,3.0\n1.7,4.0\n")
        frame = load_frame(path, {"running": "r", "outcome": "y"}, 1.5, "below", center=True)
        assert frame.cutoff == 0.0
        np.testing.assert_allclose(sorted(frame.running), [-0.1, 0.0, 0.1, 0.2])


class TestRealizeWindow:
    def test_interval_membership(self):
        frame = make_frame([-0.6, -0.3, 0.0, 0.2, 0.7])
        idx = realize_window(frame, WindowSpec(left=0.5, right=0.5), enforce=False)
        assert idx.tolist() == [1, 2, 3]

    def test_enforced_degeneracy_guard(self):
        frame = make_frame([-0.6, -0.3, 0.0, 0.2, 0.7])
        with pytest.raises(DegenerateWindowError):
            realize_window(frame, WindowSpec(left=0.5, right=0.5))

    def test_exclusion_then_degenerate(self):
        frame = make_frame([-0.6, -0.3, 0.0, 0.2, 0.7])
        window = WindowSpec(left=0.5, right=0.5, exclusions=(0.0,))
        with pytest.raises(DegenerateWindowError):
            realize_window(frame, window)

    def test_exclusions_drop_exact_count(self):
        # Each value replicated 10x: excluding two values drops exactly 20 units.
        values = np.repeat([-0.6, -0.3, 0.0, 0.2, 0.7], 10)
        frame = make_frame(values)
        base = realize_window(frame, full_window(frame))
        window = full_window(frame).with_exclusions([0.0, -0.3])
        idx = realize_window(frame, window)
        centered = frame.centered_running
        oracle = [
            i for i in base if centered[i] != 0.0 and centered[i] != -0.3
        ]
        assert idx.tolist() == oracle
        assert len(base) - len(idx) == 20

    def test_interval_exclusion(self):
        frame = make_frame(np.linspace(-1, 1, 21))
        window = WindowSpec(left=1.0, right=1.0, exclusions=((-0.1, 0.1),))
        idx = realize_window(frame, window)
        assert np.all(np.abs(frame.centered_running[idx]) > 0.1 - 1e-12)

    def test_monotone_in_bandwidth(self):
        rng = np.random.default_rng(7)
        frame = make_frame(rng.uniform(-1, 1, 200))
        previous = set()
        for bandwidth in (0.2, 0.5, 0.8, 1.0):
            idx = set(realize_window(frame, WindowSpec(bandwidth, bandwidth)).tolist())
            assert previous <= idx
            previous = idx

    def test_idempotent_and_sorted(self):
        rng = np.random.default_rng(3)
        frame = make_frame(rng.uniform(-1, 1, 50))
        window = WindowSpec(0.7, 0.7, exclusions=(0.0,))
        idx1 = realize_window(frame, window)
        idx2 = realize_window(frame.subset(idx1), full_window(frame.subset(idx1)))
        assert len(idx1) == len(idx2)
        assert np.all(np.diff(idx1) > 0)

    def test_counts(self):
        frame = make_frame([-0.4, -0.2, 0.1, 0.3, 0.5])
        idx = realize_window(frame, WindowSpec(0.5, 0.5))
        assert window_counts(frame, idx) == (5, 2, 3)

    def test_tolerance_matching(self):
        frame = make_frame([-0.4, -0.3 + 1e-9, 0.1, 0.2, -0.35, 0.3])
        strict = WindowSpec(0.5, 0.5, exclusions=(-0.3,))
        loose = WindowSpec(0.5, 0.5, exclusions=(-0.3,), tolerance=1e-6)
        assert len(realize_window(frame, strict)) == 6
        assert len(realize_window(frame, loose)) == 5
