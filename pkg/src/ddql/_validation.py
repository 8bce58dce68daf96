"""Input validation helpers shared across modules."""

import numbers

import numpy as np


def check_finite(x, name="array"):
    """Return ``x`` as a float64 array, raising if any entry is NaN or inf."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_row(q_row, name="q_row"):
    arr = check_finite(q_row, name)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-d array, got shape {arr.shape}")
    return arr


def check_index(value, upper, name):
    if not isinstance(value, numbers.Integral) or isinstance(value, bool):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    if not 0 <= value < upper:
        raise IndexError(f"{name}={value} out of range [0, {upper})")
    return int(value)


def check_distribution_rows(p, axis=-1, atol=1e-12, name="distribution"):
    """Check that every slice along ``axis`` is a probability vector."""
    arr = check_finite(p, name)
    if np.any(arr < 0):
        raise ValueError(f"{name} has negative probabilities")
    sums = arr.sum(axis=axis)
    if not np.allclose(sums, 1.0, rtol=0.0, atol=atol):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise ValueError(f"{name} rows must sum to 1 (max deviation {worst:.3g})")
    return arr


def check_in_range(value, low, high, name, *, low_open=False, high_open=False):
    ok_low = value > low if low_open else value >= low
    ok_high = value < high if high_open else value <= high
    if not (ok_low and ok_high):
        lb = "(" if low_open else "["
        rb = ")" if high_open else "]"
        raise ValueError(f"{name}={value} not in {lb}{low}, {high}{rb}")
    return value


def check_positive_int(value, name):
    if not isinstance(value, numbers.Integral) or isinstance(value, bool) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def as_generator(rng):
    """Coerce ``None``/int/SeedSequence/Generator to a ``numpy.random.Generator``."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
