"""Flip-Flop estimation for samples of partially observed arrays.

Each iteration imputes the missing cells by their conditional mean under the
current model, replaces the mean by the average of the completed arrays, and
then refreshes each covariance factor in turn from the arrays whitened along
every other mode.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, cholesky
from scipy.linalg.lapack import dpotri

from .exceptions import ConditioningError, NumericalError, RankDeficiencyError
from .normal import (LOG_2PI, ArrayNormal, kron_gather, stack_mode_product,
                     stack_mode_solve)
from .tensor import inverse_rvec, rvec

__all__ = [
    "PartialSample",
    "FitConfig",
    "FitReport",
    "conditional_mean_impute",
    "EStep",
    "expectation_step",
    "impute_sample",
    "conditional_fiber_cov",
    "observed_loglik",
    "update_mean",
    "whiten_except",
    "update_sigma_k",
    "normalize_factors",
    "initial_model",
    "flip_flop_incomplete",
]

log = logging.getLogger(__name__)


@dataclass
class PartialSample:
    """``N`` arrays of a common shape with an observed-cell mask.

    ``values`` has shape ``(N, *shape)``; cells where ``mask`` is False are
    ignored (they are stored as NaN).
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if values.ndim < 2:
            raise ValueError("values must have a leading sample axis and at least one dimension")
        if mask.shape != values.shape:
            raise ValueError(f"mask shape {mask.shape} does not match values {values.shape}")
        if not np.all(np.isfinite(values[mask])):
            raise ValueError("observed cells must be finite")
        values[~mask] = np.nan
        self.values = values
        self.mask = mask

    @classmethod
    def from_arrays(cls, arrays) -> "PartialSample":
        """Build from a stack (or list) of arrays using NaN as the missing marker."""
        values = np.asarray(arrays, dtype=float)
        return cls(values, ~np.isnan(values))

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape[1:]

    @property
    def count_observed(self) -> int:
        return int(self.mask.sum())

    def never_observed(self) -> np.ndarray:
        return ~self.mask.any(axis=0)


@dataclass
class FitConfig:
    """Iteration controls.

    ``estep="expected"`` adds the conditional covariance of the missing cells
    to the covariance updates (an exact ECM step, so the observed
    log-likelihood cannot decrease). ``estep="mean"`` uses the imputed arrays
    only; that variant is kept for comparison and is not monotone in general.
    """

    max_iterations: int = 200
    rel_tol: float = 1e-6
    init_policy: str = "sample-moment"
    estep: str = "expected"

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        if self.init_policy not in ("sample-moment", "zero-mean-identity"):
            raise ValueError(f"unknown init_policy {self.init_policy!r}")
        if self.estep not in ("expected", "mean"):
            raise ValueError(f"unknown estep {self.estep!r}")


@dataclass
class FitReport:
    model: ArrayNormal
    loglik_trace: list
    iterations: int
    converged: bool
    imputed: np.ndarray
    warnings: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


class _Coords:
    """Per-dimension coordinates of every cell, in rvec order."""

    _cache: dict = {}

    def __new__(cls, shape):
        shape = tuple(shape)
        if shape not in cls._cache:
            n = int(np.prod(shape))
            cls._cache[shape] = np.unravel_index(np.arange(n), shape, order="F")
        return cls._cache[shape]


def _chol(M: np.ndarray, what: str, observation: int | None):
    try:
        L = cholesky(M, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise ConditioningError(f"{what} is not positive definite", observation) from None
    d = np.diag(L)
    if d.size and np.min(d) ** 2 <= 1e-13 * np.max(np.abs(np.diag(M))):
        raise ConditioningError(f"{what} is numerically singular", observation)
    return L


def _chol_inverse(L: np.ndarray) -> np.ndarray:
    """Inverse of ``L L'`` from its lower Cholesky factor."""
    inv, info = dpotri(L, lower=1)
    if info != 0:
        raise ConditioningError("could not invert a conditioning block")
    lower = np.tril(inv)
    return lower + np.tril(lower, -1).T


def _kron_matvec(mats, e: np.ndarray, shape) -> np.ndarray:
    S = inverse_rvec(e, shape)[None]
    for k, M in enumerate(mats):
        S = stack_mode_product(S, M, k)
    return rvec(S[0])


def _condition(x: np.ndarray, obs: np.ndarray, model: ArrayNormal, precisions=None,
               route: str = "auto", observation: int | None = None,
               want_cov: bool = False):
    """Conditional mean of one flattened array and the log-density of its observed part.

    Two exact routes are available: ``"observed"`` factors the observed block
    ``R Λ R'`` and ``"missing"`` factors the missing block of the precision
    ``Λ^{-1}``. ``"auto"`` picks the smaller system.

    Returns ``(mean, loglik, cov)``. With ``want_cov``, ``cov`` is a triple
    ``(subtract, idx, B)`` describing the conditional covariance ``C`` of the
    full array; otherwise it is None. On the observed route
    ``C = Λ - Λ R'(R Λ R')^{-1} R Λ`` with ``idx`` the observed cells and
    ``B = (R Λ R')^{-1}``; on the missing route ``C`` is zero except for the
    missing block, which equals ``B`` (the inverse of the missing-cell
    precision block) and ``idx`` lists the missing cells.
    """
    shape = model.shape
    mu = rvec(model.mean)
    r = np.flatnonzero(obs)
    m = np.flatnonzero(~obs)
    out = mu.copy()
    if r.size == 0:
        return out, 0.0, (True, r, np.zeros((0, 0))) if want_cov else None
    out[r] = x[r]
    coords = _Coords(shape)
    e_r = x[r] - mu[r]
    if m.size == 0:
        route = "missing"
    elif route == "auto":
        route = "observed" if r.size <= m.size else "missing"

    cov = None
    if route == "observed":
        c_r = [c[r] for c in coords]
        L = _chol(kron_gather(model.sigmas, c_r, c_r), "observed-cell covariance", observation)
        alpha = cho_solve((L, True), e_r, check_finite=False)
        if m.size:
            c_m = [c[m] for c in coords]
            out[m] += kron_gather(model.sigmas, c_m, c_r) @ alpha
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        quad = float(e_r @ alpha)
        if want_cov and m.size:
            cov = (True, r, _chol_inverse(L))
    elif route == "missing":
        if precisions is None:
            precisions = model.precisions()
        e = np.zeros_like(mu)
        e[r] = e_r
        logdet_pmm = 0.0
        if m.size:
            c_m = [c[m] for c in coords]
            Lm = _chol(kron_gather(precisions, c_m, c_m), "missing-cell precision", observation)
            b = _kron_matvec(precisions, e, shape)[m]
            e[m] = -cho_solve((Lm, True), b, check_finite=False)
            out[m] += e[m]
            logdet_pmm = 2.0 * np.sum(np.log(np.diag(Lm)))
            if want_cov:
                cov = (False, m, _chol_inverse(Lm))
        quad = float(e @ _kron_matvec(precisions, e, shape))
        logdet = model.log_det_covariance() + logdet_pmm
    else:
        raise ValueError(f"unknown route {route!r}")
    ll = -0.5 * (quad + logdet + r.size * LOG_2PI)
    return out, ll, cov


def conditional_mean_impute(values: np.ndarray, mask: np.ndarray, model: ArrayNormal,
                            route: str = "auto") -> np.ndarray:
    """Fill the missing cells of one array with their conditional mean.

    Observed cells are copied through unchanged; a fully missing array comes
    back as the model mean.
    """
    values = np.asarray(values, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if values.shape != model.shape or mask.shape != model.shape:
        raise ValueError(f"array shape {values.shape} does not match model {model.shape}")
    x = np.where(mask, values, 0.0)
    out, _, _ = _condition(rvec(x), rvec(mask), model, route=route)
    return inverse_rvec(out, model.shape)


@dataclass
class EStep:
    """Conditional expectations of a sample under one fixed model.

    ``covs[l]`` is ``(subtract, idx, B)`` as produced by :func:`_condition`;
    it is ``None`` for fully observed arrays or when only means were requested.
    """

    imputed: np.ndarray
    loglik: float
    model: ArrayNormal
    covs: list


def expectation_step(sample: PartialSample, model: ArrayNormal, route: str = "auto",
                     second_moments: bool = True) -> EStep:
    if sample.shape != model.shape:
        raise ValueError(f"sample shape {sample.shape} does not match model {model.shape}")
    precisions = model.precisions()
    imputed = np.empty_like(sample.values)
    covs = []
    total = 0.0
    for l in range(sample.N):
        obs = rvec(sample.mask[l])
        x = np.where(obs, rvec(sample.values[l]), 0.0)
        out, ll, cov = _condition(x, obs, model, precisions, route=route, observation=l,
                                  want_cov=second_moments)
        imputed[l] = inverse_rvec(out, model.shape)
        covs.append(cov)
        total += ll
    return EStep(imputed, total, model, covs)


def impute_sample(sample: PartialSample, model: ArrayNormal, route: str = "auto"):
    """Conditional-mean imputation of every array: ``(imputed stack, observed log-likelihood)``."""
    e = expectation_step(sample, model, route=route, second_moments=False)
    return e.imputed, e.loglik


def conditional_fiber_cov(estep: EStep, model: ArrayNormal, k: int) -> np.ndarray:
    """Sum over observations and mode-``k`` fibers of the whitened conditional covariance.

    Whitening uses the roots of ``model`` on every mode except ``k``; the
    conditional covariances themselves were fixed by the E-step model. Adding
    the result to ``Z_(k) Z_(k)'`` gives the expected mode-``k`` scatter.

    Summing a Kronecker-structured matrix over the fibers of the other modes
    collapses those modes into elementwise factors, so only ``n x n`` work per
    observation is needed (``n`` the size of the factored block).
    """
    shape = model.shape
    m_k = shape[k]
    coords = _Coords(shape)
    old = estep.model
    prec = model.precisions()
    others = [j for j in range(len(shape)) if j != k]
    # Σ_old P_cur Σ_old: fiber-sum kernel of W_k Λ_old on the observed route
    sandwich = {j: old.sigmas[j] @ prec[j] @ old.sigmas[j] for j in others}
    trace_ratio = float(np.prod([np.sum(prec[j] * old.sigmas[j]) for j in others]))

    out = np.zeros((m_k, m_k))
    for cov in estep.covs:
        if cov is None:
            continue
        subtract, idx, B = cov
        if subtract:
            out += trace_ratio * old.sigmas[k]
            if idx.size == 0:
                continue
            mats = [sandwich[j] for j in others]
        else:
            mats = [prec[j] for j in others]
        cj = [coords[j][idx] for j in others]
        M = B * kron_gather(mats, cj, cj) if mats else B
        onehot = _level_indicator(coords[k][idx], m_k)
        agg = onehot @ (onehot @ M).T
        if subtract:
            out -= old.sigmas[k] @ agg @ old.sigmas[k]
        else:
            out += agg
    return 0.5 * (out + out.T)


def _level_indicator(levels: np.ndarray, m: int) -> np.ndarray:
    out = np.zeros((m, levels.size))
    out[levels, np.arange(levels.size)] = 1.0
    return out


def observed_loglik(sample: PartialSample, model: ArrayNormal) -> float:
    return impute_sample(sample, model)[1]


def update_mean(imputed) -> np.ndarray:
    imputed = np.asarray(imputed, dtype=float)
    if imputed.shape[0] == 0:
        raise ValueError("need at least one array")
    return imputed.mean(axis=0)


def whiten_except(arrays, model: ArrayNormal, k: int, center: np.ndarray | None = None):
    """Center by the mean and apply ``A_j^{-1}`` along every mode ``j != k``.

    ``center`` overrides the model mean.
    """
    S = np.asarray(arrays, dtype=float) - (model.mean if center is None else center)
    if not 0 <= k < len(model.shape):
        raise ValueError(f"mode {k} out of range")
    for j, A in enumerate(model.roots):
        if j != k:
            S = stack_mode_solve(S, A, j)
    return S


def mode_columns(S: np.ndarray, k: int) -> np.ndarray:
    """All mode-``k`` fibers of a stack as columns of one ``m_k x (N ∏_{j≠k} m_j)`` matrix."""
    T = np.moveaxis(np.asarray(S), k + 1, 0)
    return T.reshape(T.shape[0], -1)


def update_sigma_k(whitened, k: int, conditional: np.ndarray | None = None,
                   check_rank: bool = True) -> np.ndarray:
    """Sample covariance of the mode-``k`` fibers of the whitened arrays.

    ``conditional`` is the fiber-summed conditional covariance of the missing
    cells (see :func:`conditional_fiber_cov`); it is added to the scatter of
    the imputed arrays before dividing by the column count. Fewer columns
    than rows raise :class:`RankDeficiencyError` unless ``check_rank`` is off.
    """
    Zk = mode_columns(whitened, k)
    m_k, n_cols = Zk.shape
    if check_rank and n_cols < m_k:
        raise RankDeficiencyError(
            f"dimension {k}: {n_cols} columns cannot estimate a {m_k}x{m_k} covariance", k)
    scatter = Zk @ Zk.T
    if conditional is not None:
        scatter = scatter + conditional
    sigma = scatter / n_cols
    return 0.5 * (sigma + sigma.T)


def normalize_factors(sigmas: Sequence[np.ndarray], carrier: int = 0,
                      normalized: Sequence[int] | None = None) -> list:
    """Scale factors so their (1,1) entry is one, pushing the scale into ``carrier``."""
    sigmas = [np.array(S, dtype=float) for S in sigmas]
    if normalized is None:
        normalized = [k for k in range(len(sigmas)) if k != carrier]
    scale = 1.0
    for k in normalized:
        c = sigmas[k][0, 0]
        sigmas[k] = sigmas[k] / c
        scale *= c
    sigmas[carrier] = sigmas[carrier] * scale
    return sigmas


def initial_model(sample: PartialSample, policy: str = "sample-moment") -> ArrayNormal:
    if policy == "zero-mean-identity":
        return ArrayNormal.standard(sample.shape)
    counts = sample.mask.sum(axis=0)
    sums = np.where(sample.mask, sample.values, 0.0).sum(axis=0)
    mean = np.divide(sums, counts, out=np.zeros(sample.shape), where=counts > 0)
    return ArrayNormal.standard(sample.shape, mean)


def _relative_change(new: float, old: float) -> float:
    return abs(new - old) / max(abs(old), 1e-300)


def flip_flop_incomplete(sample: PartialSample, config: FitConfig | None = None,
                         init: ArrayNormal | None = None) -> FitReport:
    """Fit mean and Kronecker covariance factors to an incomplete sample.

    The trace holds the observed-data log-likelihood of the starting model and
    of the model after each full sweep; iteration stops once the relative
    change drops below ``config.rel_tol``. The returned model and imputations
    belong to the last trace entry.
    """
    config = config or FitConfig()
    model = init if init is not None else initial_model(sample, config.init_policy)
    warnings = []
    if sample.N > 1 and sample.never_observed().any():
        msg = (f"{int(sample.never_observed().sum())} cell(s) are missing in every "
               "observation; they are predicted from the fitted covariance alone")
        warnings.append(msg)
        log.info(msg)

    second = config.estep == "expected"
    trace = []
    converged = False
    iterations = 0
    for it in range(config.max_iterations + 1):
        try:
            estep = expectation_step(sample, model, second_moments=second)
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
            model = _sweep(estep, model)
        except NumericalError as err:
            err.args = (f"iteration {it + 1}: {err.args[0]}",) + err.args[1:]
            raise
        iterations += 1

    return FitReport(model=model, loglik_trace=trace, iterations=iterations,
                     converged=converged, imputed=estep.imputed, warnings=warnings)


def _sweep(estep: EStep, model: ArrayNormal) -> ArrayNormal:
    imputed = estep.imputed
    model = model.with_mean(update_mean(imputed))
    for k in range(len(model.shape)):
        extra = None
        if any(c is not None for c in estep.covs):
            extra = conditional_fiber_cov(estep, model, k)
        sigma = update_sigma_k(whiten_except(imputed, model, k), k, extra)
        model = model.replace_sigma(k, sigma)
    return ArrayNormal(model.mean, tuple(normalize_factors(model.sigmas)))
