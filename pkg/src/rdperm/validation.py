"""Input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


def as_float_vector(values, name: str) -> np.ndarray:
    """Coerce to a 1-D float array, rejecting non-finite entries."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_same_length(*pairs: tuple[str, np.ndarray]) -> int:
    """Check that all named arrays share one length and return it."""
    lengths = {name: len(arr) for name, arr in pairs}
    unique = set(lengths.values())
    if len(unique) > 1:
        detail = ", ".join(f"{k}={v}" for k, v in lengths.items())
        raise ValueError(f"length mismatch: {detail}")
    return unique.pop()


def check_binary_vector(values, name: str) -> np.ndarray:
    """Coerce to a 1-D array of {0, 1} integers."""
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    uniq = np.unique(arr)
    if not np.all(np.isin(uniq, (0, 1))):
        raise ValueError(f"{name} must contain only 0/1 values, got {uniq[:6]}")
    return arr.astype(np.int8)


def check_probability(value: float, name: str) -> float:
    value = float(value)
    if not 0.0 < value < 1.0:
        raise ValueError(f"{name} must lie strictly between 0 and 1, got {value}")
    return value


def check_positive(value: float, name: str) -> float:
    value = float(value)
    if not value > 0.0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value


def check_seed(seed, context: str) -> int:
    """Require an explicit integer seed wherever Monte Carlo draws occur."""
    if seed is None:
        raise ValueError(f"{context} requires an explicit integer seed")
    return int(seed)
