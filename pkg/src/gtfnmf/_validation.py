"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigurationError, DegenerateInputError, ParameterError


def check_signal(y, name="y", allow_empty=False):
    """Return ``y`` as a finite 1-D float64 array."""
    arr = np.asarray(y, dtype=np.float64)
    if arr.ndim == 2 and 1 in arr.shape:
        arr = arr.ravel()
    if arr.ndim != 1:
        raise ConfigurationError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not allow_empty and arr.size == 0:
        raise DegenerateInputError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{name} contains non-finite values")
    return arr


def check_mask(mask, length):
    """Return a boolean observation mask (True = observed) of ``length``."""
    if mask is None:
        return np.ones(length, dtype=bool)
    m = np.asarray(mask, dtype=bool).ravel()
    if m.shape[0] != length:
        raise ConfigurationError(f"mask has length {m.shape[0]}, expected {length}")
    return m


def check_positive(value, name):
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ParameterError(f"{name} must be positive and finite, got {value!r}")
    return value


def check_nonnegative_matrix(W, name="W"):
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    if W.ndim != 2:
        raise ConfigurationError(f"{name} must be two-dimensional")
    if not np.all(np.isfinite(W)) or np.any(W < 0):
        raise ParameterError(f"{name} must be finite and nonnegative")
    return W


def check_unit_interval(value, name, closed_low=False):
    value = float(value)
    lo_ok = value >= 0 if closed_low else value > 0
    if not (lo_ok and value <= 1):
        bracket = "[0, 1]" if closed_low else "(0, 1]"
        raise ParameterError(f"{name} must lie in {bracket}, got {value!r}")
    return value
