"""Input validation helpers shared across estimators and functional APIs."""

from __future__ import annotations

import numpy as np


def as_float_matrix(X, name: str = "X") -> np.ndarray:
    """Coerce to a 2-D float64 array and reject non-finite entries."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def as_float_vector(x, name: str = "x") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_labels(y, n_rows: int | None = None, name: str = "y") -> np.ndarray:
    """Validate binary labels in {0, 1}; returns an int64 vector."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {y.shape}")
    y = y.astype(np.int64)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError(f"{name} must contain only 0/1 labels")
    if n_rows is not None and y.shape[0] != n_rows:
        raise ValueError(f"{name} has {y.shape[0]} entries, expected {n_rows}")
    return y


def check_unit_box(X, name: str = "X", tol: float = 0.0) -> np.ndarray:
    """Validate that all entries lie in [0 - tol, 1 + tol]."""
    X = np.asarray(X, dtype=np.float64)
    if X.min(initial=0.0) < -tol or X.max(initial=0.0) > 1.0 + tol:
        raise ValueError(f"{name} must lie in the [0, 1] box")
    return X


def check_aligned(n_rows: int, other_len: int, name: str = "argument") -> None:
    if n_rows != other_len:
        raise ValueError(f"{name} has length {other_len}, expected {n_rows}")
