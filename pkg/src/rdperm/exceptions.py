"""Exception types raised by rdperm."""


class RdpermError(Exception):
    """Base class for all rdperm errors."""


class MissingColumnError(RdpermError):
    """A required column is absent from the input file."""


class NonNumericCellError(RdpermError):
    """A cell that must be numeric could not be parsed."""

    def __init__(self, row: int, column: str, value: str = ""):
        self.row = row
        self.column = column
        self.value = value
        super().__init__(
            f"non-numeric value {value!r} in column {column!r} at data row {row}"
        )


class EmptyFrameError(RdpermError):
    """The input table contains no usable rows."""


class DegenerateWindowError(RdpermError):
    """A realized window has fewer than 2 treated or 2 control units."""


class RankDeficientDesignError(RdpermError):
    """The regression design matrix is rank deficient (collinear columns)."""


class NonConvergenceError(RdpermError):
    """An iterative fit failed to reach its tolerance."""


class SeparationDetectedError(RdpermError):
    """Logistic fit diverged because the classes are (quasi-)separated."""


class AllTreatedOrAllControlError(RdpermError):
    """A permutation test needs at least one unit in each arm."""


class NoSignChangeError(RdpermError):
    """Point-estimate root finding could not bracket a sign change."""


class NoCovariatesError(RdpermError):
    """A balance test was requested without any covariates."""


class EmptySideError(RdpermError):
    """One side of the cutoff has no data to bin."""


class InsufficientBinsError(RdpermError):
    """Too few bins on one side of the cutoff for a density fit."""

    def __init__(self, side: str, n_bins: int, required: int):
        self.side = side
        self.n_bins = n_bins
        self.required = required
        super().__init__(
            f"{n_bins} bins on the {side} side of the cutoff; need at least {required}"
        )


class ExhaustedWithoutPassError(RdpermError):
    """An exclusion sweep ran out of candidates before the density test passed."""
