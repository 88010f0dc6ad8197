"""Input validation helpers shared across the package.

Small, sklearn-flavored checks that raise ``ValueError`` with the offending
quantity named, so estimator and function errors stay uniform.
"""

from __future__ import annotations

import numpy as np


def as_float_array(x, name="array", dtype=np.float64, ndim=None):
    """Coerce to a float ndarray, optionally enforcing dimensionality."""
    arr = np.asarray(x, dtype=dtype)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_positive_int(value, name):
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value <= 0:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_same_shape(a, b, name_a="a", name_b="b"):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {name_a} has {a.shape}, {name_b} has {b.shape}")


def check_spectrogram_batch(X, name="X"):
    """Validate a (n_samples, channels, n_mels, n_frames) spectrogram batch."""
    X = np.asarray(X)
    if X.ndim != 4:
        raise ValueError(
            f"{name} must be a 4-d array (n_samples, channels, n_mels, n_frames), "
            f"got shape {X.shape}"
        )
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_action_batch(A, name="actions"):
    """Validate a (n_samples, action_dim) matrix of action parameters."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError(f"{name} must be 2-d (n_samples, action_dim), got shape {A.shape}")
    if A.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} contains non-finite values")
    return A
