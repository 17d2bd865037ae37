"""Cholesky encoding of positive definite matrices.

A PD matrix ``X`` is stored through the unique upper-triangular ``Y`` with
positive diagonal such that ``X = Y^T Y``; ``theta`` lists the upper
triangle of ``Y`` row by row, which cuts the output dimension to n(n+1)/2.
"""

from __future__ import annotations

import numpy as np

DIAG_FLOOR = 1e-8


class FactorizationError(ValueError):
    pass


def code_length(n: int) -> int:
    return n * (n + 1) // 2


def matrix_size(length: int) -> int:
    """Inverse of :func:`code_length`."""
    n = int(round((np.sqrt(8 * length + 1) - 1) / 2))
    if code_length(n) != length:
        raise ValueError(f"{length} is not a triangular number")
    return n


def diagonal_slots(n: int) -> np.ndarray:
    """Positions of the diagonal of ``Y`` inside ``theta``.

    >>> diagonal_slots(3)
    array([0, 3, 5])
    """
    rows, cols = np.triu_indices(n)
    return np.flatnonzero(rows == cols)


def positive(y, floor: float = DIAG_FLOOR):
    """Identity above ``floor``, ``floor * exp((y - floor) / floor)`` below.

    Continuously differentiable and strictly positive, so decoded diagonals
    never vanish while trained values (well above the floor) pass unchanged.
    """
    y = np.asarray(y, dtype=float)
    low = np.minimum(y, floor)
    return np.where(y >= floor, y, floor * np.exp((low - floor) / floor))


def cholesky_encode(X) -> np.ndarray:
    """Upper-triangular Cholesky code of ``X`` (works on stacks).

    Examples
    --------
    >>> cholesky_encode(np.array([[4.0, 2.0], [2.0, 2.0]]))
    array([2., 1., 1.])
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[-1]
    if X.shape[-2] != n:
        raise FactorizationError("matrix must be square")
    if not np.allclose(X, np.swapaxes(X, -1, -2), rtol=1e-10, atol=1e-12):
        raise FactorizationError("matrix must be symmetric")
    try:
        L = np.linalg.cholesky(0.5 * (X + np.swapaxes(X, -1, -2)))
    except np.linalg.LinAlgError:
        raise FactorizationError("matrix is not positive definite") from None
    Y = np.swapaxes(L, -1, -2)
    rows, cols = np.triu_indices(n)
    return Y[..., rows, cols]


def cholesky_factor(theta) -> np.ndarray:
    """Upper-triangular ``Y`` from a code, diagonal mapped through :func:`positive`."""
    theta = np.asarray(theta, dtype=float)
    n = matrix_size(theta.shape[-1])
    rows, cols = np.triu_indices(n)
    Y = np.zeros(theta.shape[:-1] + (n, n))
    Y[..., rows, cols] = theta
    d = np.arange(n)
    Y[..., d, d] = positive(Y[..., d, d])
    return Y


def cholesky_decode(theta) -> np.ndarray:
    """``Y^T Y`` for any real code; positive definite by construction.

    Examples
    --------
    >>> cholesky_decode([1.0, 0.0, 1.0])
    array([[1., 0.],
           [0., 1.]])
    """
    Y = cholesky_factor(theta)
    return np.swapaxes(Y, -1, -2) @ Y
