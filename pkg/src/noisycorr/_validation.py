"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

import numpy as np

from .exceptions import InvalidInputError

SIMPLEX_ATOL = 1e-9


def check_vector(x, name="x", min_length=1):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.shape[0] < min_length:
        raise InvalidInputError(f"{name} needs at least {min_length} entries, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def check_same_length(a, b, names=("a", "b")):
    if a.shape[-1] != b.shape[-1]:
        raise InvalidInputError(
            f"length mismatch: {names[0]} has {a.shape[-1]}, {names[1]} has {b.shape[-1]}"
        )


def check_prob_vector(p, name="p"):
    """Return ``p`` as float64 after checking it lies on the simplex."""
    arr = check_vector(p, name, min_length=2)
    if np.any(arr < 0) or abs(arr.sum() - 1.0) > SIMPLEX_ATOL * max(1, arr.shape[0]):
        raise InvalidInputError(f"{name} is not a probability vector")
    return arr


def check_prob_batch(P, name="P"):
    arr = np.asarray(P, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] < 2:
        raise InvalidInputError(f"{name} must be a (B, K>=2) array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise InvalidInputError(f"{name} contains invalid probabilities")
    if np.any(np.abs(arr.sum(axis=1) - 1.0) > SIMPLEX_ATOL * arr.shape[1]):
        raise InvalidInputError(f"{name} rows must sum to 1")
    return arr


def check_square(S, name="sims"):
    arr = np.asarray(S, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise InvalidInputError(f"{name} must be square, got shape {arr.shape}")
    return arr
