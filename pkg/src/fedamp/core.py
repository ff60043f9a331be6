"""Flat parameter algebra.

A parameter vector is a 1-D float64 array of length ``d``; the parameter
matrix ``W`` is a ``d x m`` float64 array whose column ``i`` is client
``i``'s model.  Helpers here never modify their inputs.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, InvalidInputError


def as_vector(values, name: str = "vector") -> np.ndarray:
    """Copy ``values`` into a read-only finite float64 vector."""
    v = np.array(values, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise DimensionError(f"{name} must be a non-empty 1-D sequence, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError(f"{name} has non-finite entries")
    v.flags.writeable = False
    return v


def as_matrix(values, name: str = "W") -> np.ndarray:
    """Copy ``values`` into a read-only finite float64 ``d x m`` matrix."""
    M = np.array(values, dtype=np.float64)
    if M.ndim == 1:
        M = M[:, None]
    if M.ndim != 2 or M.shape[0] < 1 or M.shape[1] < 1:
        raise DimensionError(f"{name} must be a d x m matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise InvalidInputError(f"{name} has non-finite entries")
    M.flags.writeable = False
    return M


def from_columns(columns) -> np.ndarray:
    cols = [np.asarray(c, dtype=np.float64) for c in columns]
    if not cols:
        raise DimensionError("need at least one column")
    d = cols[0].shape
    for c in cols:
        if c.ndim != 1 or c.shape != d:
            raise DimensionError("all columns must share the same length")
    return as_matrix(np.stack(cols, axis=1))


def frobenius_norm(M) -> float:
    """Square root of the sum of squared entries, accumulated in a fixed order."""
    A = np.asarray(M, dtype=np.float64)
    if not np.all(np.isfinite(A)):
        raise InvalidInputError("matrix has non-finite entries")
    flat = A.ravel(order="F")
    return float(np.sqrt(np.dot(flat, flat)))


def sq_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"length mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.dot(diff, diff))


def pairwise_sq_distances(W) -> np.ndarray:
    """``m x m`` matrix of squared distances between the columns of ``W``."""
    W = np.asarray(W, dtype=np.float64)
    m = W.shape[1]
    D = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            D[i, j] = D[j, i] = sq_distance(W[:, i], W[:, j])
    return D
