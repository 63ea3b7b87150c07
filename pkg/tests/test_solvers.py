from itertools import combinations

import numpy as np
import pytest
import scipy.optimize
from hypothesis import given, settings, strategies as st

from dwmest.data import Dataset
from dwmest.errors import ConfigError, EstimationInfeasibleError, SchemaError
from dwmest.solvers import (
    ObjectiveKind,
    check_loss,
    solve_stacked_gmm,
    solve_weighted_binary_qmle,
    solve_weighted_glm,
    solve_weighted_ls,
    solve_weighted_qr,
    weighted_quantile,
)
from dwmest.weights import compute_weights, weights_from_probabilities
from dwmest.binary import fit_missingness, fit_propensity

from conftest import synthetic_dataset


def _all_observed_ds(y, w, x):
    y = np.asarray(y, dtype=float)
    return Dataset.from_arrays(y, w, np.ones(len(y), dtype=int), x)


def _unit_weights(ds):
    return weights_from_probabilities(
        ds, np.full(ds.n_rows, 0.5), np.full(ds.n_rows, 0.5), "unweighted"
    )


def test_ls_interpolates_exact_linear_data():
    x = np.array([[0.0], [1.0], [2.0], [3.0]])
    y = 2.0 + 3.0 * x[:, 0]
    ds = _all_observed_ds(y, [1, 1, 1, 1], x)
    ws = weights_from_probabilities(ds, np.full(4, 0.9), np.full(4, 0.9), "unweighted")
    fit = solve_weighted_ls(ds, ws, 1)
    np.testing.assert_allclose(fit.theta, [2.0, 3.0], atol=1e-12)


def test_ls_matches_normal_equations_oracle(rng):
    x = rng.normal(size=(5, 2))
    y = rng.normal(size=5)
    w = rng.uniform(0.5, 3.0, size=5)
    ds = _all_observed_ds(y, np.ones(5, dtype=int), x)
    g = 1.0 / (1.0 + w)  # arbitrary probabilities that reproduce w on arm 1
    ws = weights_from_probabilities(ds, g, np.ones(5) * 0.99999, "ps_weighted")
    fit = solve_weighted_ls(ds, ws, 1)
    X = ds.covariates
    omega = np.diag(ws.w_treated)
    oracle = np.linalg.inv(X.T @ omega @ X) @ X.T @ omega @ y
    np.testing.assert_allclose(fit.theta, oracle, atol=1e-10)


def test_ls_score_foc_and_hessian_structure(rng):
    ds = synthetic_dataset(rng)
    ws = compute_weights(fit_propensity(ds), fit_missingness(ds), ds, "d_weighted")
    fit = solve_weighted_ls(ds, ws, 1)
    assert np.max(np.abs(fit.row_scores.mean(axis=0))) < 1e-10
    np.testing.assert_allclose(fit.hessian, fit.hessian.T, atol=1e-14)
    assert np.linalg.eigvalsh(fit.hessian).min() > 0
    off_arm = (ds.treatment == 0) | (ds.observed == 0)
    assert np.all(fit.row_scores[off_arm] == 0.0)


def test_glm_gaussian_equals_ls(rng):
    ds = synthetic_dataset(rng)
    ws = compute_weights(fit_propensity(ds), fit_missingness(ds), ds, "d_weighted")
    ls = solve_weighted_ls(ds, ws, 0)
    glm = solve_weighted_glm(ds, ws, 0, "gaussian_identity")
    np.testing.assert_allclose(glm.theta, ls.theta, atol=1e-10)


def test_bernoulli_logit_intercept_only_closed_form(rng):
    n = 40
    y = (rng.uniform(size=n) < 0.3).astype(float)
    if y.mean() in (0.0, 1.0):
        y[0] = 1 - y[0]
    ds = Dataset.from_arrays(y, np.ones(n, dtype=int), np.ones(n, dtype=int),
                             np.ones((n, 1)))
    ws = _unit_weights(ds)
    fit = solve_weighted_glm(ds, ws, 1, "bernoulli_logit")
    assert fit.theta[0] == pytest.approx(np.log(y.mean() / (1 - y.mean())), abs=1e-8)


def test_glm_mean_fitting_property(rng):
    ds = synthetic_dataset(rng)
    y01 = (ds.outcome_filled(0.0) > ds.outcome_filled(0.0).mean()).astype(float)
    ds2 = Dataset.from_arrays(
        np.where(ds.observed == 1, y01, np.nan), ds.treatment, ds.observed,
        ds.covariates[:, 1:],
    )
    ws = compute_weights(fit_propensity(ds2), fit_missingness(ds2), ds2, "d_weighted")
    fit = solve_weighted_glm(ds2, ws, 1, "bernoulli_logit")
    w = ws.effective(1)
    resid = ds2.outcome_filled(0.0) - fit.predict_mean(ds2.covariates)
    assert abs(np.dot(w, resid)) <= 1e-8 * w.sum()


def test_glm_range_violation():
    ds = _all_observed_ds([0.5, -1.0, 2.0], [1, 1, 1], [[0.1], [0.2], [0.3]])
    ws = _unit_weights(ds)
    with pytest.raises(SchemaError):
        solve_weighted_glm(ds, ws, 1, "bernoulli_logit")
    with pytest.raises(SchemaError):
        solve_weighted_glm(ds, ws, 1, "poisson_log")


def test_binary_qmle_probit_matches_scipy(rng):
    from scipy.stats import norm

    n = 150
    x = rng.normal(size=(n, 1))
    y = (norm.cdf(0.5 + 0.8 * x[:, 0]) > rng.uniform(size=n)).astype(float)
    if y.min() == y.max():
        y[:2] = [0.0, 1.0]
    ds = Dataset.from_arrays(y, np.ones(n, dtype=int), np.ones(n, dtype=int), x)
    w = rng.uniform(0.5, 2.0, size=n)
    ws = weights_from_probabilities(ds, 1 / (1 + w), np.full(n, 0.99999), "ps_weighted")
    fit = solve_weighted_binary_qmle(ds, ws, 1, link="probit")

    wt = ws.w_treated

    def nll(beta):
        p = np.clip(norm.cdf(ds.covariates @ beta), 1e-12, 1 - 1e-12)
        return -np.dot(wt, y * np.log(p) + (1 - y) * np.log(1 - p))

    res = scipy.optimize.minimize(nll, np.zeros(2), method="BFGS", tol=1e-13)
    np.testing.assert_allclose(fit.theta, res.x, atol=5e-6)
    assert np.max(np.abs(fit.row_scores.mean(axis=0))) < 1e-7


# ---------------------------------------------------------------- quantile


def test_qr_intercept_only_median():
    ds = Dataset.from_arrays([1.0, 2.0, 3.0], [1, 1, 1], [1, 1, 1], np.ones((3, 1)))
    ws = _unit_weights(ds)
    fit = solve_weighted_qr(ds, ws, 1, 0.5)
    assert fit.theta[0] == pytest.approx(2.0, abs=1e-9)


def test_qr_tie_break_returns_smallest():
    ds = Dataset.from_arrays([1.0, 2.0, 3.0], [1, 1, 1], [1, 1, 1], np.ones((3, 1)))
    g = 1.0 / (1.0 + np.array([1.0, 1.0, 2.0]))
    ws = weights_from_probabilities(ds, g, np.full(3, 0.99999), "ps_weighted")
    fit = solve_weighted_qr(ds, ws, 1, 0.5)
    # any point of [2, 3] minimizes; lexicographic rule picks the left end
    assert fit.theta[0] == pytest.approx(2.0, abs=1e-7)


def _brute_force_qr(X, y, w, tau):
    n, k = X.shape
    best = np.inf
    best_theta = None
    for rows in combinations(range(n), k):
        sub = X[list(rows)]
        if abs(np.linalg.det(sub)) < 1e-12:
            continue
        theta = np.linalg.solve(sub, y[list(rows)])
        loss = float(np.dot(w, check_loss(y - X @ theta, tau)))
        if loss < best - 1e-15:
            best, best_theta = loss, theta
    return best, best_theta


def test_qr_matches_basic_solution_enumeration(rng):
    for trial in range(6):
        n, k = 8, 2
        X = np.column_stack([np.ones(n), rng.normal(size=n)])
        y = rng.normal(size=n) * 2.0
        w = rng.uniform(0.2, 3.0, size=n)
        ds = Dataset.from_arrays(y, np.ones(n, dtype=int), np.ones(n, dtype=int), X[:, 1:])
        ws = weights_from_probabilities(ds, 1 / (1 + w), np.full(n, 0.99999), "ps_weighted")
        fit = solve_weighted_qr(ds, ws, 1, 0.25)
        best, _ = _brute_force_qr(ds.covariates, y, ws.w_treated, 0.25)
        assert fit.objective_value == pytest.approx(best, abs=1e-10)


def test_qr_subgradient_contains_zero(rng):
    ds = synthetic_dataset(rng, n=150)
    ws = compute_weights(fit_propensity(ds), fit_missingness(ds), ds, "d_weighted")
    tau = 0.3
    fit = solve_weighted_qr(ds, ws, 1, tau)
    w = ws.effective(1)
    resid = ds.outcome_filled(0.0) - ds.covariates @ fit.theta
    X = ds.covariates
    zero_tol = 1e-7 * (1.0 + np.abs(ds.outcome_filled(0.0)).max())
    lo = np.zeros(3)
    hi = np.zeros(3)
    for i in np.flatnonzero(w > 0):
        if abs(resid[i]) <= zero_tol:  # at the kink: interval contribution
            gneg = w[i] * X[i] * (0.0 - tau)
            gpos = w[i] * X[i] * (1.0 - tau)
        else:
            gneg = gpos = w[i] * X[i] * ((resid[i] < 0) - tau)
        lo += np.minimum(gneg, gpos)
        hi += np.maximum(gneg, gpos)
    slack = 1e-6 * (1.0 + np.abs(X[w > 0]).sum())
    assert np.all(lo <= slack) and np.all(hi >= -slack)


def test_weighted_quantile_matches_lp(rng):
    for _ in range(8):
        n = rng.integers(3, 12)
        y = np.round(rng.normal(size=n), 1)  # rounding forces ties
        w = rng.integers(1, 4, size=n).astype(float)
        tau = float(rng.uniform(0.1, 0.9))
        ds = Dataset.from_arrays(y, np.ones(n, dtype=int), np.ones(n, dtype=int), np.ones((n, 1)))
        ws = weights_from_probabilities(ds, 1 / (1 + w), np.full(n, 0.99999), "ps_weighted")
        lp = solve_weighted_qr(ds, ws, 1, tau)
        q = weighted_quantile(y, ws.w_treated, tau)
        assert lp.theta[0] == pytest.approx(q, abs=1e-8)


def test_qr_needs_enough_rows():
    ds = Dataset.from_arrays([1.5], [1], [1], np.ones((1, 1)))
    ws = _unit_weights(ds)
    fit = solve_weighted_qr(ds, ws, 1, 0.5)  # exactly P rows is fine
    assert fit.theta[0] == pytest.approx(1.5, abs=1e-9)
    with pytest.raises(EstimationInfeasibleError):
        solve_weighted_qr(ds, ws, 0, 0.5)  # empty arm


# ----------------------------------------------------- shared invariants


@pytest.mark.parametrize("scale", [0.3, 1.0, 7.5])
def test_constant_weight_invariance(rng, scale):
    import dataclasses

    ds = synthetic_dataset(rng, n=200)
    base = compute_weights(fit_propensity(ds), fit_missingness(ds), ds, "d_weighted")
    scaled = dataclasses.replace(base, weights=base.weights * scale)
    for solver in (
        lambda d, w: solve_weighted_ls(d, w, 1).theta,
        lambda d, w: solve_weighted_glm(d, w, 1, "gaussian_identity").theta,
        lambda d, w: solve_weighted_qr(d, w, 1, 0.4).theta,
    ):
        np.testing.assert_allclose(solver(ds, base), solver(ds, scaled), atol=1e-8)


def test_unweighted_equals_plain_subsample_solve(rng):
    ds = synthetic_dataset(rng)
    ws = compute_weights(fit_propensity(ds), fit_missingness(ds), ds, "unweighted")
    fit = solve_weighted_ls(ds, ws, 1)
    rows = (ds.treatment == 1) & (ds.observed == 1)
    X, y = ds.covariates[rows], ds.outcome_filled(0.0)[rows]
    plain = np.linalg.lstsq(X, y, rcond=None)[0]
    np.testing.assert_allclose(fit.theta, plain, atol=1e-10)


def test_row_permutation_invariance(rng):
    ds = synthetic_dataset(rng, n=120)
    perm = rng.permutation(ds.n_rows)
    ds_p = Dataset.from_arrays(
        ds.outcome_filled(np.nan)[perm], ds.treatment[perm], ds.observed[perm],
        ds.covariates[perm, 1:],
    )

    def run(d):
        ws = compute_weights(fit_propensity(d), fit_missingness(d), d, "d_weighted")
        return solve_weighted_ls(d, ws, 1).theta, solve_weighted_qr(d, ws, 1, 0.5).theta

    ls_a, qr_a = run(ds)
    ls_b, qr_b = run(ds_p)
    np.testing.assert_allclose(ls_b, ls_a, atol=1e-9)
    np.testing.assert_allclose(qr_b, qr_a, atol=1e-7)


def test_zero_weight_row_append_invariance(rng):
    ds = synthetic_dataset(rng, n=100)
    ws = compute_weights(fit_propensity(ds), fit_missingness(ds), ds, "d_weighted")
    fit = solve_weighted_ls(ds, ws, 1)
    # append an unobserved row: weights are zero there by construction
    ds2 = Dataset.from_arrays(
        np.append(ds.outcome_filled(np.nan), np.nan),
        np.append(ds.treatment, 1),
        np.append(ds.observed, 0),
        np.vstack([ds.covariates, [1.0, 0.5, 0.5]])[:, 1:],
    )
    ws2 = weights_from_probabilities(
        ds2,
        np.append(ws.ps_fit.fitted_probs, 0.5),
        np.append(ws.miss_fit.fitted_probs, 0.5),
        "d_weighted",
    )
    fit2 = solve_weighted_ls(ds2, ws2, 1)
    np.testing.assert_allclose(fit2.theta, fit.theta, atol=1e-12)


# ------------------------------------------------------------- stacked GMM


def test_stacked_gmm_equals_two_step(rng):
    ds = synthetic_dataset(rng, n=500)
    stacked = solve_stacked_gmm(ds)
    ps = fit_propensity(ds)
    miss = fit_missingness(ds)
    ws = compute_weights(ps, miss, ds, "d_weighted")
    fit1 = solve_weighted_ls(ds, ws, 1)
    fit0 = solve_weighted_ls(ds, ws, 0)
    np.testing.assert_allclose(stacked.theta_treated, fit1.theta, atol=1e-6)
    np.testing.assert_allclose(stacked.theta_control, fit0.theta, atol=1e-6)
    np.testing.assert_allclose(stacked.gamma, ps.coefficients, atol=1e-6)
    np.testing.assert_allclose(stacked.delta, miss.coefficients, atol=1e-6)


def test_stacked_root_invariant_to_block_scaling(rng):
    ds = synthetic_dataset(rng, n=300)
    stacked = solve_stacked_gmm(ds)
    # independent recomputation of the moments at the root, with arbitrary
    # positive block scalings: all blocks should still vanish
    X = ds.covariates
    Z = ds.augmented_design()
    W = ds.treatment.astype(float)
    S = ds.observed.astype(float)
    y = ds.outcome_filled(0.0)
    G = 1 / (1 + np.exp(-(X @ stacked.gamma)))
    R = 1 / (1 + np.exp(-(Z @ stacked.delta)))
    n1 = (S * W).sum()
    n0 = (S * (1 - W)).sum()
    m0 = (ds.n_rows / n0) * X.T @ (S * (1 - W) / (R * (1 - G)) * (y - X @ stacked.theta_control))
    m1 = (ds.n_rows / n1) * X.T @ (S * W / (R * G) * (y - X @ stacked.theta_treated))
    m2 = 3.7 * X.T @ (W - G)
    m3 = 0.2 * Z.T @ (S - R)
    for block in (m0, m1, m2, m3):
        assert np.max(np.abs(block)) / ds.n_rows < 1e-6


def test_stacked_gmm_glm_family(rng):
    ds = synthetic_dataset(rng, n=400)
    y01 = (ds.outcome_filled(0.0) > 2.0).astype(float)
    ds2 = Dataset.from_arrays(
        np.where(ds.observed == 1, y01, np.nan), ds.treatment, ds.observed,
        ds.covariates[:, 1:],
    )
    stacked = solve_stacked_gmm(ds2, objective=ObjectiveKind("glm_qmle", family="bernoulli_logit"))
    ws = compute_weights(fit_propensity(ds2), fit_missingness(ds2), ds2, "d_weighted")
    fit1 = solve_weighted_glm(ds2, ws, 1, "bernoulli_logit")
    np.testing.assert_allclose(stacked.theta_treated, fit1.theta, atol=1e-5)


def test_objective_kind_validation():
    with pytest.raises(ConfigError):
        ObjectiveKind("quantile", tau=0.0)
    with pytest.raises(ConfigError):
        ObjectiveKind("glm_qmle", family="weibull")
    with pytest.raises(ConfigError):
        ObjectiveKind("banana")


@settings(max_examples=20, deadline=None)
@given(st.floats(min_value=0.05, max_value=0.95), st.integers(min_value=2, max_value=20))
def test_weighted_quantile_reduces_to_order_statistics(tau, n):
    values = np.arange(n, dtype=float)
    weights = np.ones(n)
    q = weighted_quantile(values, weights, tau)
    cum = np.arange(1, n + 1) / n
    expected = values[int(np.searchsorted(cum, tau * (1 - 1e-12), side="left"))]
    assert q == expected
