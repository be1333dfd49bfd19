"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

import numpy as np

from .errors import ContractError, DimensionError, UtteranceTooShortError


def check_features(features, min_frames=1, n_mels=None):
    """Return ``features`` as a finite 2-d float array with at least ``min_frames`` rows."""
    arr = np.asarray(features)
    if arr.ndim != 2:
        raise DimensionError(f"features must be 2-d [frames, mels], got shape {arr.shape}")
    if n_mels is not None and arr.shape[1] != n_mels:
        raise DimensionError(f"features must have {n_mels} columns, got {arr.shape[1]}")
    if arr.shape[0] < min_frames:
        raise UtteranceTooShortError(f"utterance has {arr.shape[0]} frames; need at least {min_frames}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise ContractError("features contain NaN or Inf")
    return arr


def check_windows(windows, frames, n_mels):
    arr = np.asarray(windows)
    if arr.ndim != 3 or arr.shape[1:] != (frames, n_mels):
        raise DimensionError(f"windows must be [N, {frames}, {n_mels}], got {arr.shape}")
    return arr


def check_label(y):
    if y not in (0, 1):
        raise ContractError(f"label must be 0 or 1, got {y!r}")
    return int(y)


def check_probs(probs, atol=1e-6):
    """Validate a ``[T+1, K]`` posterior matrix (rows on the simplex)."""
    arr = np.asarray(probs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ContractError(f"posterior track must be a non-empty [T+1, K] matrix, got shape {arr.shape}")
    if arr.shape[1] < 2:
        raise DimensionError(f"posterior track needs K >= 2 classes, got {arr.shape[1]}")
    if np.any(arr < 0) or np.any(np.abs(arr.sum(axis=1) - 1.0) > atol):
        raise ContractError("posterior rows must be non-negative and sum to 1")
    return arr


def check_fraction(value, name, low_open=True, high_open=True):
    lo_ok = value > 0 if low_open else value >= 0
    hi_ok = value < 1 if high_open else value <= 1
    if not (lo_ok and hi_ok):
        lo = "(" if low_open else "["
        hi = ")" if high_open else "]"
        raise ContractError(f"{name} must lie in {lo}0, 1{hi}, got {value}")
    return float(value)
