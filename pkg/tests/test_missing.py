import logging
import math

import numpy as np
import pytest

from multiway.exceptions import RankDeficiencyError
from multiway.missing import (FitConfig, PartialSample, conditional_fiber_cov,
                              conditional_mean_impute, expectation_step, flip_flop_incomplete,
                              normalize_factors, observed_loglik, update_mean, update_sigma_k,
                              whiten_except)
from multiway.normal import ArrayNormal, log_density, sample, vec_parameters
from multiway.tensor import rvec
from oracles import (cells, complete_flip_flop, conditional_mean, dense_kron, mvn_logpdf,
                     random_spd)


def random_model(rng, shape):
    return ArrayNormal(rng.normal(size=shape), tuple(random_spd(rng, m) for m in shape))


def random_partial(rng, model, N, p):
    X = sample(model, N, rng)
    mask = rng.random(X.shape) >= p
    return X, PartialSample(np.where(mask, X, np.nan), mask)


# ------------------------------------------------------------ conditional mean


def test_impute_fully_observed_returns_values(rng):
    model = random_model(rng, (2, 3))
    X = rng.normal(size=(2, 3))
    np.testing.assert_array_equal(conditional_mean_impute(X, np.ones((2, 3), bool), model), X)


def test_impute_fully_missing_returns_mean(rng):
    model = random_model(rng, (2, 3))
    out = conditional_mean_impute(np.full((2, 3), np.nan), np.zeros((2, 3), bool), model)
    np.testing.assert_array_equal(out, model.mean)


def test_impute_bivariate_formula():
    rho, x1 = 0.6, 1.7
    model = ArrayNormal(np.zeros((2, 1)), (np.array([[1.0, rho], [rho, 1.0]]), np.eye(1)))
    out = conditional_mean_impute(np.array([[x1], [np.nan]]), np.array([[True], [False]]), model)
    assert out[1, 0] == pytest.approx(rho * x1, rel=1e-14)
    assert out[0, 0] == x1


@pytest.mark.parametrize("route", ["observed", "missing", "auto"])
def test_impute_matches_dense_oracle(rng, route):
    model = random_model(rng, (3, 2, 2))
    mu, Lam = vec_parameters(model)
    for p in (0.2, 0.5, 0.8):
        X = sample(model, 1, rng)[0]
        mask = rng.random(X.shape) >= p
        got = conditional_mean_impute(np.where(mask, X, np.nan), mask, model, route=route)
        want = conditional_mean(rvec(np.where(mask, X, 0.0)), rvec(mask), mu, Lam)
        np.testing.assert_allclose(rvec(got), want, rtol=1e-10, atol=1e-10)
        # observed cells pass through bit for bit
        np.testing.assert_array_equal(got[mask], X[mask])


# ------------------------------------------------------------ observed log-likelihood


def test_observed_loglik_fully_observed_is_sum_of_densities(rng):
    model = random_model(rng, (2, 3))
    X = sample(model, 4, rng)
    data = PartialSample(X, np.ones(X.shape, bool))
    want = sum(log_density(x, model) for x in X)
    assert observed_loglik(data, model) == pytest.approx(want, abs=1e-9)


def test_observed_loglik_single_scalar():
    data = PartialSample(np.zeros((1, 1)), np.ones((1, 1), bool))
    model = ArrayNormal(np.zeros(1), (np.eye(1),))
    assert observed_loglik(data, model) == pytest.approx(-0.5 * math.log(2 * math.pi))


@pytest.mark.parametrize("route", ["observed", "missing"])
def test_observed_loglik_matches_marginal_oracle(rng, route):
    model = random_model(rng, (3, 2, 2))
    mu, Lam = vec_parameters(model)
    X, data = random_partial(rng, model, 5, 0.4)
    want = 0.0
    for l in range(data.N):
        o = np.flatnonzero(rvec(data.mask[l]))
        if o.size:
            want += mvn_logpdf(rvec(X[l])[o], mu[o], Lam[np.ix_(o, o)])
    got = expectation_step(data, model, route=route, second_moments=False).loglik
    assert got == pytest.approx(want, abs=1e-9)


# ------------------------------------------------------------ M-step pieces


def test_update_mean_examples(rng):
    X = rng.normal(size=(2, 3))
    np.testing.assert_array_equal(update_mean([X]), X)
    np.testing.assert_array_equal(update_mean([X, -X]), np.zeros((2, 3)))
    S = rng.normal(size=(3, 2, 2))
    want = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            want[i, j] = (S[0, i, j] + S[1, i, j] + S[2, i, j]) / 3
    np.testing.assert_allclose(update_mean(S), want, rtol=1e-15)


def test_whiten_except_examples(rng):
    M = rng.normal(size=(2, 3))
    X = rng.normal(size=(4, 2, 3))
    model = ArrayNormal(M, (np.eye(2), np.eye(3)))
    np.testing.assert_allclose(whiten_except(X, model, 0), X - M)
    v = ArrayNormal(np.array([1.0, 2.0]), (random_spd(rng, 2),))
    np.testing.assert_allclose(whiten_except(np.array([[3.0, 5.0]]), v, 0), [[2.0, 3.0]])
    d = ArrayNormal(np.zeros((3, 2)), (random_spd(rng, 3), np.diag([4.0, 9.0])))
    Y = rng.normal(size=(1, 3, 2))
    Z = whiten_except(Y, d, 0)
    np.testing.assert_allclose(Z[0], Y[0] * np.array([1 / 2, 1 / 3]))


def test_update_sigma_k_examples(rng):
    np.testing.assert_array_equal(update_sigma_k(np.zeros((3, 2, 2)), 0), np.zeros((2, 2)))
    a, b = 1.5, -0.7
    S = update_sigma_k(np.array([[[a], [b]]]), 0, check_rank=False)
    np.testing.assert_allclose(S, [[a * a, a * b], [a * b, b * b]])
    with pytest.raises(RankDeficiencyError) as err:
        update_sigma_k(np.zeros((1, 3, 2)), 0)
    assert err.value.dimension == 0


def test_update_sigma_k_matches_double_loop(rng):
    Z = rng.normal(size=(3, 2, 3, 2))
    for k in range(3):
        m = Z.shape[k + 1]
        want = np.zeros((m, m))
        count = 0
        for l in range(Z.shape[0]):
            for idx in cells(Z.shape[1:]):
                if idx[k] != 0:
                    continue
                fiber = []
                for a in range(m):
                    j = list(idx)
                    j[k] = a
                    fiber.append(Z[(l, *j)])
                fiber = np.array(fiber)
                want += np.outer(fiber, fiber)
                count += 1
        np.testing.assert_allclose(update_sigma_k(Z, k), want / count, rtol=1e-13, atol=1e-15)


def test_update_sigma_k_monte_carlo():
    S = np.array([[1.0, 0.5], [0.5, 1.0]])
    model = ArrayNormal(np.zeros((2, 3)), (S, np.eye(3)))
    X = sample(model, 5000, 3)
    est = update_sigma_k(whiten_except(X, model, 0), 0)
    assert np.linalg.norm(est - S) / np.linalg.norm(S) < 0.05


def test_normalization_preserves_kronecker_product(rng):
    sigmas = [random_spd(rng, m) for m in (3, 2, 2)]
    normed = normalize_factors(sigmas)
    for S in normed[1:]:
        assert S[0, 0] == pytest.approx(1.0)
    np.testing.assert_allclose(dense_kron(normed), dense_kron(sigmas), rtol=1e-9)


def test_conditional_fiber_cov_matches_dense_oracle(rng):
    shape = (3, 2, 2)
    old = random_model(rng, shape)
    cur = random_model(rng, shape)
    _, data = random_partial(rng, old, 4, 0.45)
    data.mask[0] = False
    data.values[0] = np.nan
    data.mask[1] = True
    data.values[1] = sample(old, 1, rng)[0]
    _, Lam = vec_parameters(old)
    n = Lam.shape[0]
    coords = list(cells(shape))
    for route in ("observed", "missing"):
        estep = expectation_step(data, old, route=route)
        for k in range(3):
            T = dense_kron([np.eye(m) if j == k else np.linalg.inv(cur.roots[j])
                            for j, m in enumerate(shape)])
            want = np.zeros((shape[k], shape[k]))
            for l in range(data.N):
                obs = rvec(data.mask[l])
                o, m = np.flatnonzero(obs), np.flatnonzero(~obs)
                C = np.zeros((n, n))
                if m.size:
                    Cmm = Lam[np.ix_(m, m)]
                    if o.size:
                        Cmm = Cmm - Lam[np.ix_(m, o)] @ np.linalg.solve(Lam[np.ix_(o, o)],
                                                                        Lam[np.ix_(o, m)])
                    C[np.ix_(m, m)] = Cmm
                W = T @ C @ T.T
                for p in range(n):
                    for q in range(n):
                        same = all(coords[p][j] == coords[q][j] for j in range(3) if j != k)
                        if same:
                            want[coords[p][k], coords[q][k]] += W[p, q]
            got = conditional_fiber_cov(estep, cur, k)
            np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


# ------------------------------------------------------------ full algorithm


def test_complete_2d_matches_reference_flip_flop(rng):
    model = ArrayNormal(rng.normal(size=(3, 4)), (random_spd(rng, 3), random_spd(rng, 4)))
    X = sample(model, 30, rng)
    data = PartialSample(X, np.ones(X.shape, bool))
    rep = flip_flop_incomplete(data, FitConfig(rel_tol=1e-14, max_iterations=2000))
    M, S1, S2 = complete_flip_flop(X)
    np.testing.assert_allclose(rep.model.mean, M, atol=1e-12)
    assert np.linalg.norm(rep.model.sigmas[0] - S1) < 1e-6
    assert np.linalg.norm(rep.model.sigmas[1] - S2) < 1e-6


def test_fit_trace_monotone_and_imputations_informative(rng):
    truth = ArrayNormal(rng.normal(size=(6, 4, 2)),
                        tuple(random_spd(rng, m, 0.3) for m in (6, 4, 2)))
    X, data = random_partial(rng, truth, 100, 0.1)
    rep = flip_flop_incomplete(data)
    trace = np.array(rep.loglik_trace)
    assert np.all(np.diff(trace) >= -1e-8 * np.abs(trace[:-1]))
    miss = ~data.mask
    assert np.corrcoef(rep.imputed[miss], X[miss])[0, 1] > 0
    assert rep.converged and rep.iterations == len(trace) - 1
    np.testing.assert_array_equal(rep.imputed[data.mask], X[data.mask])
    assert rep.model.sigmas[1][0, 0] == pytest.approx(1.0)
    assert rep.model.sigmas[2][0, 0] == pytest.approx(1.0)


def test_single_complete_observation_is_rank_deficient(rng):
    X = rng.normal(size=(1, 3, 2))
    data = PartialSample(X, np.ones(X.shape, bool))
    with pytest.raises(RankDeficiencyError, match="iteration 1"):
        flip_flop_incomplete(data, FitConfig(init_policy="zero-mean-identity"))


def test_never_observed_cell_warns(rng, caplog):
    truth = random_model(rng, (3, 2))
    X, data = random_partial(rng, truth, 10, 0.1)
    data.mask[:, 0, 0] = False
    data.values[:, 0, 0] = np.nan
    with caplog.at_level(logging.INFO, logger="multiway"):
        rep = flip_flop_incomplete(data, FitConfig(max_iterations=5))
    assert rep.warnings and "missing in every observation" in rep.warnings[0]
    assert np.all(np.isfinite(rep.imputed))


def test_max_iterations_reports_not_converged(rng):
    truth = random_model(rng, (3, 2))
    _, data = random_partial(rng, truth, 10, 0.3)
    rep = flip_flop_incomplete(data, FitConfig(max_iterations=2, rel_tol=1e-15))
    assert not rep.converged and rep.iterations == 2 and len(rep.loglik_trace) == 3


def test_mean_only_variant_runs(rng):
    truth = random_model(rng, (3, 2))
    _, data = random_partial(rng, truth, 10, 0.3)
    rep = flip_flop_incomplete(data, FitConfig(estep="mean", max_iterations=20))
    assert np.isfinite(rep.loglik_trace[-1])


def test_config_validation():
    for bad in (dict(max_iterations=0), dict(rel_tol=0.0), dict(init_policy="x"),
                dict(estep="x")):
        with pytest.raises(ValueError):
            FitConfig(**bad)
