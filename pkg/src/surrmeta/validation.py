"""Input validation helpers shared across the package."""

from __future__ import annotations

import numbers

import numpy as np


class InsufficientDataError(ValueError):
    """Raised when a study or marker has too few observations to estimate."""


class SingularityError(ArithmeticError):
    """Raised when a total variance (within + between) is exactly zero."""


def check_vector(x, name, *, min_len=1, allow_nan=False):
    """Return ``x`` as a 1-D float array, validating length and finiteness."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size < min_len:
        raise InsufficientDataError(
            f"{name} needs at least {min_len} values, got {arr.size}"
        )
    bad = ~np.isfinite(arr)
    if allow_nan:
        bad &= ~np.isnan(arr)
    if bad.any():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_same_length(**arrays):
    lengths = {k: len(v) for k, v in arrays.items()}
    if len(set(lengths.values())) > 1:
        raise ValueError(f"length mismatch: {lengths}")


def check_level(value, name="level", *, closed_low=False):
    """Validate a probability-like level in (0, 1) (or [0, 1) if ``closed_low``)."""
    if not isinstance(value, numbers.Real):
        raise TypeError(f"{name} must be a real number")
    low_ok = value >= 0 if closed_low else value > 0
    if not (low_ok and value < 1):
        raise ValueError(f"{name} must lie in {'[' if closed_low else '('}0, 1), got {value}")
    return float(value)


def check_positive(value, name):
    if not isinstance(value, numbers.Real) or not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a positive finite number, got {value}")
    return float(value)


def check_random_state(seed):
    """Turn ``seed`` into a :class:`numpy.random.Generator`."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
