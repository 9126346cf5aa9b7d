"""Multilinear algebra on dense multiway arrays.

Arrays are plain :class:`numpy.ndarray` objects. The canonical linear order
of the cells is dimension-1-fastest (Fortran order), so ``rvec`` is a view for
Fortran-contiguous input. Modes are numpy axes and therefore 0-based; the
``linear_index`` helper keeps the 1-based convention of the index formula.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

__all__ = [
    "linear_index",
    "rvec",
    "inverse_rvec",
    "matricize",
    "dematricize",
    "mode_product",
    "tucker_multiply",
    "mode_solve_triangular",
    "kronecker_product",
    "kron_all",
    "square_norm",
]


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(m) for m in shape)
    if len(shape) == 0:
        raise ValueError("array order must be at least 1")
    if any(m < 1 for m in shape):
        raise ValueError(f"all dimensions must be >= 1, got {shape}")
    return shape


def _check_mode(k: int, order: int) -> int:
    if not isinstance(k, (int, np.integer)) or not 0 <= k < order:
        raise ValueError(f"mode {k!r} out of range for an order-{order} array")
    return int(k)


def linear_index(multi_index: Sequence[int], shape: Sequence[int]) -> int:
    """Position of a cell in ``rvec`` order, 1-based in and out.

    ``j = (j_i - 1) m_{i-1}...m_1 + ... + (j_2 - 1) m_1 + j_1``.
    """
    shape = _check_shape(shape)
    if len(multi_index) != len(shape):
        raise ValueError(f"index {tuple(multi_index)} does not match shape {shape}")
    j = 0
    stride = 1
    for jk, mk in zip(multi_index, shape):
        if not 1 <= jk <= mk:
            raise ValueError(f"index {tuple(multi_index)} out of range for shape {shape}")
        j += (jk - 1) * stride
        stride *= mk
    return j + 1


def rvec(X: np.ndarray) -> np.ndarray:
    """Stack the cells of ``X`` with dimension 1 varying fastest."""
    return np.asarray(X).reshape(-1, order="F")


def inverse_rvec(v: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    shape = _check_shape(shape)
    v = np.asarray(v)
    if v.ndim != 1 or v.size != int(np.prod(shape)):
        raise ValueError(f"vector of length {v.size} cannot fill shape {shape}")
    return v.reshape(shape, order="F")


def matricize(X: np.ndarray, k: int) -> np.ndarray:
    """Mode-``k`` unfolding: ``m_k`` rows, other modes in canonical column order."""
    X = np.asarray(X)
    k = _check_mode(k, X.ndim)
    return np.moveaxis(X, k, 0).reshape(X.shape[k], -1, order="F")


def dematricize(V: np.ndarray, k: int, shape: Sequence[int]) -> np.ndarray:
    shape = _check_shape(shape)
    k = _check_mode(k, len(shape))
    V = np.asarray(V)
    rest = shape[:k] + shape[k + 1:]
    if V.shape != (shape[k], int(np.prod(rest))):
        raise ValueError(f"matrix of shape {V.shape} is not a mode-{k} unfolding of {shape}")
    return np.moveaxis(V.reshape((shape[k],) + rest, order="F"), 0, k)


def mode_product(X: np.ndarray, A: np.ndarray, k: int) -> np.ndarray:
    """Multiply ``X`` along mode ``k`` by the matrix ``A``."""
    X = np.asarray(X)
    A = np.asarray(A)
    k = _check_mode(k, X.ndim)
    if A.ndim != 2 or A.shape[1] != X.shape[k]:
        raise ValueError(
            f"factor of shape {A.shape} cannot act on mode {k} of length {X.shape[k]}"
        )
    return np.moveaxis(np.tensordot(A, X, axes=(1, k)), 0, k)


def tucker_multiply(factors: Iterable[tuple[np.ndarray, int]], X: np.ndarray) -> np.ndarray:
    """R-matrix (Tucker, n-mode) product of ``X`` with ``(matrix, mode)`` pairs.

    Modes without a factor are left as they are (identity factor).
    """
    X = np.asarray(X)
    seen = set()
    for A, k in factors:
        k = _check_mode(k, X.ndim)
        if k in seen:
            raise ValueError(f"more than one factor given for mode {k}")
        seen.add(k)
        X = mode_product(X, A, k)
    return X


def mode_solve_triangular(X: np.ndarray, L: np.ndarray, k: int, lower: bool = True,
                          trans: int = 0) -> np.ndarray:
    """Apply ``L^{-1}`` (or ``L^{-T}`` with ``trans=1``) along mode ``k``."""
    X = np.asarray(X, dtype=float)
    V = matricize(X, k)
    W = solve_triangular(L, V, lower=lower, trans=trans, check_finite=False)
    return dematricize(W, k, X.shape)


def kronecker_product(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.kron(np.atleast_2d(A), np.atleast_2d(B))


def kron_all(mats: Sequence[np.ndarray]) -> np.ndarray:
    """``mats[-1] ⊗ ... ⊗ mats[0]``, the order matching ``rvec``."""
    out = np.ones((1, 1))
    for M in mats:
        out = np.kron(np.atleast_2d(M), out)
    return out


def square_norm(X: np.ndarray) -> float:
    x = rvec(np.asarray(X, dtype=float))
    return float(np.dot(x, x))
