"""Array-variate normal distribution with Kronecker covariance.

For an order-i array X with mean M and covariance factors Σ_1, ..., Σ_i the
vectorized array ``rvec(X)`` is normal with covariance ``Σ_i ⊗ ... ⊗ Σ_1``.
Every factor is carried together with its lower Cholesky root ``A_k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .exceptions import NotPositiveDefiniteError, SizeLimitError
from .tensor import kron_all, rvec

__all__ = [
    "ArrayNormal",
    "factor_root",
    "log_density",
    "vec_parameters",
    "sample",
    "stack_mode_product",
    "stack_mode_solve",
    "kron_gather",
    "MATERIALIZE_CAP",
]

LOG_2PI = math.log(2.0 * math.pi)
MATERIALIZE_CAP = 4096
# relative pivot threshold below which a factor counts as not positive definite
PD_JITTER = 1e-13


def factor_root(sigma: np.ndarray, dimension: int | None = None) -> np.ndarray:
    """Lower Cholesky root ``A`` with ``A @ A.T == sigma``.

    Raises
    ------
    NotPositiveDefiniteError
        If ``sigma`` is not symmetric positive definite. The failing dimension
        is named in the message when given.
    """
    sigma = np.asarray(sigma, dtype=float)
    where = f" for dimension {dimension}" if dimension is not None else ""
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise NotPositiveDefiniteError(f"covariance factor{where} is not square", dimension)
    if not np.all(np.isfinite(sigma)):
        raise NotPositiveDefiniteError(f"covariance factor{where} has non-finite entries",
                                       dimension)
    scale = np.max(np.abs(np.diag(sigma))) if sigma.size else 0.0
    try:
        A = cholesky(sigma, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError(
            f"covariance factor{where} is not positive definite", dimension) from None
    piv = np.diag(A)
    if scale <= 0 or np.min(piv) ** 2 <= PD_JITTER * scale:
        raise NotPositiveDefiniteError(
            f"covariance factor{where} is numerically singular "
            f"(smallest pivot {np.min(piv):.3g})", dimension)
    return A


@dataclass(frozen=True)
class ArrayNormal:
    """Mean array plus one covariance factor per dimension."""

    mean: np.ndarray
    sigmas: tuple
    roots: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        sigmas = tuple(np.asarray(S, dtype=float) for S in self.sigmas)
        if mean.ndim != len(sigmas):
            raise ValueError(
                f"mean has order {mean.ndim} but {len(sigmas)} covariance factors were given")
        for k, (m, S) in enumerate(zip(mean.shape, sigmas)):
            if S.shape != (m, m):
                raise ValueError(f"factor {k} has shape {S.shape}, expected {(m, m)}")
        if any(np.max(np.abs(S - S.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(S)))
               for S in sigmas):
            raise ValueError("covariance factors must be symmetric")
        roots = tuple(factor_root(S, k) for k, S in enumerate(sigmas))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "sigmas", sigmas)
        object.__setattr__(self, "roots", roots)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mean.shape

    @property
    def size(self) -> int:
        return self.mean.size

    def with_mean(self, mean: np.ndarray) -> "ArrayNormal":
        return ArrayNormal(mean, self.sigmas)

    def replace_sigma(self, k: int, sigma: np.ndarray) -> "ArrayNormal":
        sigmas = list(self.sigmas)
        sigmas[k] = sigma
        return ArrayNormal(self.mean, tuple(sigmas))

    def log_det_root(self, k: int) -> float:
        return float(np.sum(np.log(np.diag(self.roots[k]))))

    def log_det_covariance(self) -> float:
        """``log|Λ|`` from the root diagonals."""
        n = self.size
        return 2.0 * sum(n // m * self.log_det_root(k) for k, m in enumerate(self.shape))

    def precisions(self) -> tuple:
        return tuple(cho_solve((A, True), np.eye(A.shape[0]), check_finite=False)
                     for A in self.roots)

    @classmethod
    def standard(cls, shape: Sequence[int], mean: np.ndarray | None = None) -> "ArrayNormal":
        shape = tuple(shape)
        if mean is None:
            mean = np.zeros(shape)
        return cls(mean, tuple(np.eye(m) for m in shape))


def stack_mode_product(S: np.ndarray, A: np.ndarray, k: int) -> np.ndarray:
    """Mode-``k`` product applied to every array of a stack ``S[l, ...]``."""
    return np.moveaxis(np.tensordot(A, S, axes=(1, k + 1)), 0, k + 1)


def stack_mode_solve(S: np.ndarray, L: np.ndarray, k: int, trans: int = 0) -> np.ndarray:
    """``L^{-1}`` along mode ``k`` of every array in the stack (triangular solve)."""
    T = np.moveaxis(S, k + 1, 0)
    shp = T.shape
    W = solve_triangular(L, T.reshape(shp[0], -1), lower=True, trans=trans,
                         check_finite=False)
    return np.moveaxis(W.reshape(shp), 0, k + 1)


def _whiten(E: np.ndarray, model: ArrayNormal) -> np.ndarray:
    S = E[None]
    for k, A in enumerate(model.roots):
        S = stack_mode_solve(S, A, k)
    return S[0]


def log_density(X: np.ndarray, model: ArrayNormal) -> float:
    X = np.asarray(X, dtype=float)
    if X.shape != model.shape:
        raise ValueError(f"array of shape {X.shape} does not match model shape {model.shape}")
    Z = _whiten(X - model.mean, model)
    n = X.size
    quad = float(np.dot(rvec(Z), rvec(Z)))
    return -0.5 * quad - 0.5 * n * LOG_2PI - 0.5 * model.log_det_covariance()


def vec_parameters(model: ArrayNormal, cap: int = MATERIALIZE_CAP):
    """``(rvec(M), Σ_i ⊗ ... ⊗ Σ_1)``; refuses shapes with more than ``cap`` cells."""
    if model.size > cap:
        raise SizeLimitError(
            f"refusing to materialize a {model.size}x{model.size} covariance (cap {cap})")
    return rvec(model.mean).copy(), kron_all(model.sigmas)


def sample(model: ArrayNormal, n: int, rng: np.random.Generator | int | None = None) -> np.ndarray:
    """Draw ``n`` arrays; returns a stack of shape ``(n, *model.shape)``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(rng)
    Z = rng.standard_normal((n,) + model.shape)
    for k, A in enumerate(model.roots):
        Z = stack_mode_product(Z, A, k)
    return Z + model.mean


def kron_gather(mats: Sequence[np.ndarray], rows: Sequence[np.ndarray],
                cols: Sequence[np.ndarray]) -> np.ndarray:
    """Entries of ``mats[-1] ⊗ ... ⊗ mats[0]`` at per-dimension index grids.

    ``rows[k]`` and ``cols[k]`` hold the dimension-k coordinates of the wanted
    row and column cells, so the result is ``len(rows[0]) x len(cols[0])``.
    """
    out = None
    for M, r, c in zip(mats, rows, cols):
        block = np.take(np.take(M, r, axis=0), c, axis=1)
        if out is None:
            out = block
        else:
            out *= block
    return out
