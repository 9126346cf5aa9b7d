"""Multiway semi-parametric mixed model (AVSPMM).

The response array is array-normal with covariance factors
``σ²(K_1 + λ_1 I)``, ``(K_2 + λ_2 I)``, ... for dimensions whose kernel ``K_k``
is known, and a free covariance ``Σ_k`` (first diagonal entry one) for the
others. The mean is additive over the levels of each dimension.

Variance components of known-kernel dimensions are estimated from the
whitened, vectorized mode-k data ``z_(k) ~ N(0, σ² (I ⊗ K_k + λ_k I))`` with an
EMMA-style profile likelihood in ``λ_k``; the eigenvectors of ``I ⊗ K_k`` are
never formed explicitly.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence, Union

import numpy as np
from scipy.linalg import eigh, qr

from .exceptions import DomainError, NumericalError, RankDeficiencyError
from .missing import (EStep, FitConfig, FitReport, PartialSample, _relative_change,
                      conditional_fiber_cov, expectation_step, mode_columns,
                      update_mean, whiten_except)
from .normal import ArrayNormal, stack_mode_product

__all__ = [
    "KnownKernel",
    "Unstructured",
    "AdditiveMean",
    "AvspmmModel",
    "SpmmProblem",
    "KronEigen",
    "LambdaFit",
    "additive_mean_array",
    "estimate_beta_k",
    "spmm_profile_loglik",
    "kron_eigen_H",
    "mode_vector",
    "array_profile_loglik",
    "optimize_lambda_k",
    "fit_avspmm",
    "kron_mse",
]

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
EIG_CLAMP = 1e-10


@dataclass
class KnownKernel:
    """Dimension with a known PSD kernel and error-to-signal ratio ``lam``."""

    kernel: np.ndarray
    lam: float = 1.0

    def __post_init__(self):
        K = np.asarray(self.kernel, dtype=float)
        if K.ndim != 2 or K.shape[0] != K.shape[1]:
            raise ValueError("kernel must be square")
        if np.max(np.abs(K - K.T), initial=0.0) > 1e-10 * max(1.0, np.max(np.abs(K))):
            raise ValueError("kernel must be symmetric")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        self.kernel = 0.5 * (K + K.T)

    @cached_property
    def eig(self):
        d, U = eigh(self.kernel)
        if d.size and d[0] < -EIG_CLAMP * max(1.0, abs(d[-1])):
            raise ValueError(f"kernel is not positive semi-definite (eigenvalue {d[0]:.3g})")
        return np.clip(d, 0.0, None), U

    @property
    def size(self) -> int:
        return self.kernel.shape[0]


@dataclass
class Unstructured:
    """Dimension with a free covariance matrix, scaled so ``sigma[0, 0] == 1``."""

    sigma: np.ndarray | None = None


DimensionSpec = Union[KnownKernel, Unstructured]


@dataclass
class AdditiveMean:
    """``M[q_1, ..., q_i] = β_1[q_1] + ... + β_i[q_i]`` over the included dimensions.

    The first included dimension carries the grand intercept; the other
    included coefficient vectors sum to zero. Excluded dimensions stay zero.
    """

    betas: list
    include: tuple

    @classmethod
    def zeros(cls, shape: Sequence[int], include: Sequence[bool]) -> "AdditiveMean":
        if len(include) != len(shape):
            raise ValueError("one inclusion flag per dimension is required")
        return cls([np.zeros(m) for m in shape], tuple(bool(f) for f in include))

    @property
    def reference(self) -> int | None:
        return next((k for k, f in enumerate(self.include) if f), None)


def additive_mean_array(mean: AdditiveMean, shape: Sequence[int]) -> np.ndarray:
    shape = tuple(shape)
    if len(mean.betas) != len(shape):
        raise ValueError("one coefficient vector per dimension is required")
    out = np.zeros(shape)
    for k, (b, m) in enumerate(zip(mean.betas, shape)):
        b = np.asarray(b, dtype=float)
        if b.shape != (m,):
            raise ValueError(f"coefficient vector {k} has length {b.size}, expected {m}")
        view = [1] * len(shape)
        view[k] = m
        out = out + b.reshape(view)
    return out


def _balanced_weights(sigma: np.ndarray) -> np.ndarray:
    """``Σ^{-1} 1 / (1' Σ^{-1} 1)``: GLS weights for averaging over one mode."""
    w = np.linalg.solve(sigma, np.ones(sigma.shape[0]))
    return w / w.sum()


def estimate_beta_k(arrays, model: ArrayNormal, mean: AdditiveMean, k: int,
                    constrained: bool | None = None) -> np.ndarray:
    """Generalized least squares update of ``β_k`` with the other coefficients fixed.

    The arrays are centred by the additive mean with ``β_k`` set to zero and
    then averaged over every mode except ``k``; with identity covariances this
    is the plain average of the mode-k columns. The GLS weights over mode
    ``j`` are ``Σ_j^{-1} 1`` normalized to sum to one, which is what averaging
    columns in the whitened scale amounts to once mapped back. ``Σ_k`` itself
    drops out. Unless ``k`` is the reference dimension the result is projected
    onto ``1'β_k = 0`` in the ``Σ_k^{-1}`` metric.
    """
    S = np.asarray(arrays, dtype=float)
    betas = [np.asarray(b, dtype=float) for b in mean.betas]
    betas[k] = np.zeros_like(betas[k])
    R = S - additive_mean_array(AdditiveMean(betas, mean.include), model.shape)
    for j, sigma in enumerate(model.sigmas):
        if j != k:
            R = stack_mode_product(R, _balanced_weights(sigma)[None, :], j)
    beta = R.reshape(R.shape[0], -1).mean(axis=0)
    if constrained is None:
        constrained = k != mean.reference
    if constrained:
        s1 = model.sigmas[k] @ np.ones(beta.size)
        beta = beta - s1 * (beta.sum() / s1.sum())
    return beta


@dataclass
class SpmmProblem:
    """``y = X β + Z g + e`` with ``g ~ N(0, σ_g² K)`` and ``e ~ N(0, σ_e² I)``."""

    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    K: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        if self.X.shape[0] != self.y.size:
            self.X = self.X.T
        self.Z = np.asarray(self.Z, dtype=float)
        self.K = np.asarray(self.K, dtype=float)
        n = self.y.size
        if self.X.shape[0] != n or self.Z.shape[0] != n:
            raise ValueError("X and Z must have one row per response")
        if self.K.shape != (self.Z.shape[1], self.Z.shape[1]):
            raise ValueError("K must be square with one row per column of Z")
        if np.linalg.matrix_rank(self.X) < self.X.shape[1]:
            raise ValueError("X must have full column rank")

    @cached_property
    def _spectra(self):
        G = self.Z @ self.K @ self.Z.T
        G = 0.5 * (G + G.T)
        eps, U = eigh(G)
        n, q = self.X.shape
        Q, _ = qr(self.X, mode="full")
        V0 = Q[:, q:]
        tau, V = eigh(V0.T @ G @ V0)
        eta = V.T @ (V0.T @ self.y)
        return np.clip(eps, 0.0, None), U, np.clip(tau, 0.0, None), eta


def spmm_profile_loglik(lam: float, problem: SpmmProblem):
    """Profile log-likelihood of ``λ = σ_e²/σ_g²`` with ``β`` and ``σ_g²`` maximized out.

    Returns ``(loglik, beta_hat, sigma_g2_hat)``.
    """
    eps, U, tau, eta = problem._spectra
    if lam < 0 or np.any(eps + lam <= 0) or np.any(tau + lam <= 0):
        raise DomainError(f"H is singular at lambda={lam}")
    n = problem.y.size
    hinv = 1.0 / (eps + lam)
    Xr = U.T @ problem.X
    yr = U.T @ problem.y
    XtHX = Xr.T @ (hinv[:, None] * Xr)
    try:
        beta = np.linalg.solve(XtHX, Xr.T @ (hinv * yr))
    except np.linalg.LinAlgError:
        raise DomainError("X' H^{-1} X is singular") from None
    quad = float(np.sum(eta ** 2 / (tau + lam)))
    sigma_g2 = quad / n
    ll = 0.5 * (n * math.log(n / (2 * math.pi)) - n - n * math.log(quad)
                - float(np.sum(np.log(eps + lam))))
    return ll, beta, sigma_g2


@dataclass
class KronEigen:
    """Implicit eigendecomposition of ``H_k = I_R ⊗ K_k + λ I``.

    Eigenvalues are stored without ``λ``; the eigenvectors are ``I_R ⊗ U_k``.
    """

    kernel_eigvals: np.ndarray
    U: np.ndarray
    replication: int

    @property
    def n_star(self) -> int:
        return self.replication * self.kernel_eigvals.size

    def eigenvalues(self, lam: float = 0.0) -> np.ndarray:
        return np.tile(self.kernel_eigvals + lam, self.replication)

    def rotate(self, z: np.ndarray) -> np.ndarray:
        """``(I ⊗ U_k)' z`` computed block by block."""
        z = np.asarray(z, dtype=float)
        m = self.U.shape[0]
        if z.size != self.n_star:
            raise ValueError(f"vector of length {z.size} does not match n* = {self.n_star}")
        return (self.U.T @ z.reshape(m, -1, order="F")).reshape(-1, order="F")

    def block_sums(self, z: np.ndarray) -> np.ndarray:
        """Squared rotated data summed over the replicated blocks, one value per eigenvalue."""
        m = self.U.shape[0]
        eta = self.U.T @ np.asarray(z, dtype=float).reshape(m, -1, order="F")
        return np.einsum("ij,ij->i", eta, eta)


def kron_eigen_H(K: np.ndarray, lam: float, replication: int) -> KronEigen:
    """Workspace for ``H_k = I ⊗ K + λ I``; ``lam`` only enters through later calls."""
    if replication < 1:
        raise ValueError("replication must be >= 1")
    if lam < 0:
        raise ValueError("lam must be non-negative")
    d, U = KnownKernel(K).eig
    return KronEigen(d, U, int(replication))


def mode_vector(arrays, k: int) -> np.ndarray:
    """``z_(k)``: mode-k fibers of a stack laid end to end."""
    return mode_columns(arrays, k).reshape(-1, order="F")


def _profile(lam, sums, d, replication, n_star):
    """Profile log-likelihood from per-eigenvalue sums of squares; ``-inf`` off-domain."""
    h = d + lam
    if np.any(h <= 0):
        return -np.inf, np.nan
    quad = float(np.sum(sums / h))
    if quad <= 0:
        return -np.inf, np.nan
    ll = 0.5 * (n_star * math.log(n_star / (2 * math.pi)) - n_star
                - n_star * math.log(quad) - replication * float(np.sum(np.log(h))))
    return ll, quad / n_star


def array_profile_loglik(lam: float, z_k: np.ndarray, workspace: KronEigen):
    """Profile log-likelihood of ``λ_k`` at ``σ̂²``; returns ``(loglik, sigma2_hat)``."""
    if np.any(workspace.kernel_eigvals + lam <= 0):
        raise DomainError(f"H_k is singular at lambda={lam}")
    sums = workspace.block_sums(z_k)
    return _profile(lam, sums, workspace.kernel_eigvals, workspace.replication,
                    workspace.n_star)


@dataclass
class LambdaFit:
    lam: float
    loglik: float
    sigma2: float
    at_boundary: bool
    grid_best: float = field(default=np.nan, repr=False)


def _golden_max(f, a, b, iters=80, tol=1e-10):
    g = (math.sqrt(5.0) - 1.0) / 2.0
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if b - a < tol:
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    return (c, fc) if fc >= fd else (d, fd)


def _optimize_sums(sums, d, replication, bounds=(1e-9, 1e9), n_grid=100,
                   candidates=()) -> LambdaFit:
    n_star = replication * d.size
    lo, hi = math.log(bounds[0]), math.log(bounds[1])
    grid = np.linspace(lo, hi, n_grid)

    def f(t):
        return _profile(math.exp(t), sums, d, replication, n_star)[0]

    values = np.array([f(t) for t in grid])
    i = int(np.argmax(values))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, n_grid - 1)]
    t_best, f_best = _golden_max(f, a, b)
    if values[i] > f_best:
        t_best, f_best = grid[i], values[i]
    for lam in candidates:
        if bounds[0] <= lam <= bounds[1]:
            fl = f(math.log(lam))
            if fl > f_best:
                t_best, f_best = math.log(lam), fl
    lam = math.exp(t_best)
    ll, s2 = _profile(lam, sums, d, replication, n_star)
    step = grid[1] - grid[0] if n_grid > 1 else 0.0
    at_boundary = t_best <= lo + step or t_best >= hi - step
    return LambdaFit(lam, ll, s2, at_boundary, float(np.exp(grid[i])))


def optimize_lambda_k(z_k: np.ndarray, workspace: KronEigen, bounds=(1e-9, 1e9),
                      n_grid: int = 100) -> LambdaFit:
    """Maximize the profile likelihood over a log grid, then golden-section refine."""
    sums = workspace.block_sums(z_k)
    return _optimize_sums(sums, workspace.kernel_eigvals, workspace.replication,
                          bounds, n_grid)


@dataclass
class AvspmmModel:
    """Additive (or saturated) mean, global scale and one spec per dimension.

    ``sigma2`` multiplies the factor of the first known-kernel dimension. With
    no known kernel it is fixed at one and the first factor carries the scale.
    """

    mean: Union[AdditiveMean, np.ndarray]
    sigma2: float
    specs: list

    @property
    def carrier(self) -> int:
        return next((k for k, s in enumerate(self.specs) if isinstance(s, KnownKernel)), 0)

    @property
    def shape(self) -> tuple:
        return tuple(s.size if isinstance(s, KnownKernel) else s.sigma.shape[0]
                     for s in self.specs)

    def mean_array(self) -> np.ndarray:
        if isinstance(self.mean, AdditiveMean):
            return additive_mean_array(self.mean, self.shape)
        return np.asarray(self.mean, dtype=float)

    def factor(self, k: int) -> np.ndarray:
        spec = self.specs[k]
        if isinstance(spec, KnownKernel):
            S = spec.kernel + spec.lam * np.eye(spec.size)
            return self.sigma2 * S if k == self.carrier else S
        return spec.sigma

    def to_array_normal(self) -> ArrayNormal:
        return ArrayNormal(self.mean_array(), tuple(self.factor(k) for k in range(len(self.specs))))


def _initial_avspmm(sample: PartialSample, specs, mean_flags, init_lambda=1.0) -> AvspmmModel:
    shape = sample.shape
    if len(specs) != len(shape):
        raise ValueError(f"{len(specs)} dimension specs for an order-{len(shape)} sample")
    new_specs = []
    for k, (spec, m) in enumerate(zip(specs, shape)):
        if isinstance(spec, KnownKernel):
            if spec.size != m:
                raise ValueError(f"kernel for dimension {k} has {spec.size} levels, data has {m}")
            new_specs.append(KnownKernel(spec.kernel, spec.lam if spec.lam > 0 else init_lambda))
        elif isinstance(spec, Unstructured):
            sigma = np.eye(m) if spec.sigma is None else np.asarray(spec.sigma, dtype=float)
            if sigma.shape != (m, m):
                raise ValueError(f"covariance for dimension {k} must be {m}x{m}")
            new_specs.append(Unstructured(sigma))
        else:
            raise TypeError(f"unknown dimension spec {spec!r}")

    observed = sample.values[sample.mask]
    grand = float(observed.mean()) if observed.size else 0.0
    var = float(observed.var()) if observed.size > 1 else 1.0
    if mean_flags is None:
        counts = sample.mask.sum(axis=0)
        sums = np.where(sample.mask, sample.values, 0.0).sum(axis=0)
        mean = np.divide(sums, counts, out=np.full(shape, grand), where=counts > 0)
    else:
        mean = AdditiveMean.zeros(shape, mean_flags)
        if mean.reference is not None:
            mean.betas[mean.reference][:] = grand
    model = AvspmmModel(mean, 1.0, new_specs)
    if any(isinstance(s, KnownKernel) for s in new_specs):
        base = model.to_array_normal()
        scale = float(np.prod([np.mean(np.diag(S)) for S in base.sigmas]))
        model.sigma2 = max(var, 1e-8) / scale
    return model


def _update_known(estep: EStep, model: AvspmmModel, k: int, lambda_bounds, n_grid):
    spec = model.specs[k]
    current = model.to_array_normal()
    Z = whiten_except(estep.imputed, current, k)
    G = mode_columns(Z, k)
    scatter = G @ G.T
    if any(c is not None for c in estep.covs):
        scatter = scatter + conditional_fiber_cov(estep, current, k)
    d, U = spec.eig
    sums = np.einsum("ij,ij->j", U, scatter @ U)
    replication = G.shape[1]
    fit = _optimize_sums(sums, d, replication, lambda_bounds, n_grid, candidates=(spec.lam,))
    if not np.isfinite(fit.loglik):
        raise DomainError(f"dimension {k}: profile likelihood undefined over the lambda range")
    spec.lam = fit.lam
    if k == model.carrier:
        model.sigma2 = fit.sigma2
    else:
        model.sigma2 *= fit.sigma2
    return fit


def _update_unstructured(estep: EStep, model: AvspmmModel, k: int):
    current = model.to_array_normal()
    Z = whiten_except(estep.imputed, current, k)
    G = mode_columns(Z, k)
    m_k, n_cols = G.shape
    if n_cols < m_k:
        raise RankDeficiencyError(
            f"dimension {k}: {n_cols} columns cannot estimate a {m_k}x{m_k} covariance", k)
    scatter = G @ G.T
    if any(c is not None for c in estep.covs):
        scatter = scatter + conditional_fiber_cov(estep, current, k)
    sigma = 0.5 * (scatter + scatter.T) / n_cols
    carrier = model.carrier
    if k == carrier and not isinstance(model.specs[carrier], KnownKernel):
        model.specs[k].sigma = sigma
        return
    c = sigma[0, 0]
    model.specs[k].sigma = sigma / c
    if isinstance(model.specs[carrier], KnownKernel):
        model.sigma2 *= c
    else:
        model.specs[carrier].sigma = model.specs[carrier].sigma * c


def _update_mean(estep: EStep, model: AvspmmModel):
    if not isinstance(model.mean, AdditiveMean):
        model.mean = update_mean(estep.imputed)
        return
    current = model.to_array_normal()
    for k, flag in enumerate(model.mean.include):
        if flag:
            model.mean.betas[k] = estimate_beta_k(estep.imputed, current, model.mean, k)


def fit_avspmm(sample: PartialSample, specs: Sequence[DimensionSpec],
               config: FitConfig | None = None, mean_flags: Sequence[bool] | None = None,
               init: AvspmmModel | None = None, lambda_bounds=(1e-9, 1e9),
               n_grid: int = 100) -> FitReport:
    """Fit the AVSPMM to an incomplete sample.

    Each iteration imputes missing cells under the current model, refreshes
    the additive mean (or the saturated cellwise mean when ``mean_flags`` is
    None), then updates each dimension in turn: ``(σ², λ_k)`` by the profile
    likelihood for known kernels, the sample covariance of the whitened
    fibers for unstructured ones. ``report.extra["avspmm"]`` holds the fitted
    :class:`AvspmmModel`.
    """
    config = config or FitConfig()
    model = copy.deepcopy(init) if init is not None else _initial_avspmm(sample, specs, mean_flags)
    second = config.estep == "expected"
    warnings = []
    if sample.N > 1 and sample.never_observed().any():
        msg = (f"{int(sample.never_observed().sum())} cell(s) are missing in every "
               "observation; they are predicted from the fitted covariance alone")
        warnings.append(msg)
        log.info(msg)

    trace = []
    lambda_fits = []
    converged = False
    iterations = 0
    for it in range(config.max_iterations + 1):
        try:
            estep = expectation_step(sample, model.to_array_normal(), second_moments=second)
        except NumericalError as err:
            err.args = (f"iteration {it}: {err.args[0]}",) + err.args[1:]
            raise
        trace.append(estep.loglik)
        if it > 0 and _relative_change(estep.loglik, trace[-2]) < config.rel_tol:
            converged = True
            break
        if it == config.max_iterations:
            break
        try:
            _update_mean(estep, model)
            fits = {}
            for k, spec in enumerate(model.specs):
                if isinstance(spec, KnownKernel):
                    fits[k] = _update_known(estep, model, k, lambda_bounds, n_grid)
                else:
                    _update_unstructured(estep, model, k)
            lambda_fits.append(fits)
        except NumericalError as err:
            err.args = (f"iteration {it + 1}: {err.args[0]}",) + err.args[1:]
            raise
        iterations += 1

    return FitReport(model=model.to_array_normal(), loglik_trace=trace, iterations=iterations,
                     converged=converged, imputed=estep.imputed, warnings=warnings,
                     extra={"avspmm": model, "lambda_fits": lambda_fits})


def kron_mse(sigmas_a: Sequence[np.ndarray], sigmas_b: Sequence[np.ndarray]) -> float:
    """Mean squared entrywise difference of two Kronecker products, without forming them.

    Uses ``‖⊗A - ⊗B‖² = ∏‖A_k‖² - 2∏tr(A_k'B_k) + ∏‖B_k‖²``.
    """
    aa = ab = bb = 1.0
    n = 1
    for A, B in zip(sigmas_a, sigmas_b):
        aa *= float(np.sum(A * A))
        ab *= float(np.sum(A * B))
        bb *= float(np.sum(B * B))
        n *= A.shape[0]
    return max(aa - 2.0 * ab + bb, 0.0) / float(n) ** 2
