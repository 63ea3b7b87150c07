import numpy as np
import pytest

from dwmest.binary import BinaryFit, fit_missingness, fit_propensity
from dwmest.data import Dataset
from dwmest.errors import ConfigError, ReliabilityError
from dwmest.inference import (
    ate_variance,
    efficiency_report,
    pairs_bootstrap,
    sandwich_theta,
)
from dwmest.solvers import MEstimateFit, ObjectiveKind, solve_weighted_ls
from dwmest.weights import compute_weights, weights_from_probabilities

from conftest import synthetic_dataset


def _fitted(rng, n=300):
    ds = synthetic_dataset(rng, n=n)
    ps, miss = fit_propensity(ds), fit_missingness(ds)
    ws = compute_weights(ps, miss, ds, "d_weighted")
    fit1 = solve_weighted_ls(ds, ws, 1)
    fit0 = solve_weighted_ls(ds, ws, 0)
    return ds, ps, miss, ws, fit1, fit0


def test_adjusted_never_exceeds_unadjusted(rng):
    ds, ps, miss, ws, fit1, _ = _fitted(rng)
    adj = sandwich_theta(fit1, ps, miss, "adjusted")
    una = sandwich_theta(fit1, ps, miss, "unadjusted")
    gap = una.components["omega"] - adj.components["omega"]
    assert np.linalg.eigvalsh(gap).min() >= -1e-8
    gap_cov = una.covariance - adj.covariance
    assert np.linalg.eigvalsh(gap_cov).min() >= -1e-10


def test_covariance_is_symmetric_psd(rng):
    ds, ps, miss, ws, fit1, _ = _fitted(rng)
    for mode in ("adjusted", "unadjusted"):
        v = sandwich_theta(fit1, ps, miss, mode)
        np.testing.assert_allclose(v.covariance, v.covariance.T, atol=1e-14)
        assert np.linalg.eigvalsh(v.covariance).min() >= -1e-8
        assert np.all(v.se >= 0)


def test_orthogonal_scores_make_modes_coincide():
    # fabricated fixture: second-step scores exactly orthogonal in-sample
    # to both first-stage score matrices
    n = 40
    rng = np.random.default_rng(5)
    b = rng.normal(size=(n, 2))
    d = rng.normal(size=(n, 2))
    l = rng.normal(size=(n, 2))
    stack = np.column_stack([b, d])
    proj = stack @ np.linalg.solve(stack.T @ stack, stack.T @ l)
    l_orth = l - proj

    def _bf(scores):
        return BinaryFit(
            link="logit",
            coefficients=np.zeros(2),
            fitted_probs=np.full(n, 0.5),
            scores=scores,
            information=scores.T @ scores / n,
            converged=True,
            iterations=1,
        )

    fit = MEstimateFit(
        arm=1,
        objective=ObjectiveKind("least_squares"),
        theta=np.zeros(2),
        row_scores=l_orth,
        hessian=np.eye(2),
        objective_value=0.0,
        n_effective=n,
    )
    adj = sandwich_theta(fit, _bf(d), _bf(b), "adjusted")
    una = sandwich_theta(fit, _bf(d), _bf(b), "unadjusted")
    np.testing.assert_allclose(adj.covariance, una.covariance, atol=1e-12)


def test_sandwich_invariant_to_zero_weight_rows(rng):
    ds, ps, miss, ws, fit1, _ = _fitted(rng)
    v = sandwich_theta(fit1, ps, miss, "adjusted")

    # append one unobserved row: all scores zero there, H and Omega rescale
    def pad(mat, fill=0.0):
        return np.vstack([mat, np.full((1, mat.shape[1]), fill)])

    fit_pad = MEstimateFit(
        arm=1,
        objective=fit1.objective,
        theta=fit1.theta,
        row_scores=pad(fit1.row_scores),
        hessian=fit1.hessian * ds.n_rows / (ds.n_rows + 1),
        objective_value=fit1.objective_value,
        n_effective=fit1.n_effective,
    )
    ps_pad = BinaryFit(
        link=ps.link, coefficients=ps.coefficients,
        fitted_probs=np.append(ps.fitted_probs, 0.5),
        scores=pad(ps.scores), information=pad(ps.scores).T @ pad(ps.scores) / (ds.n_rows + 1),
        converged=True, iterations=ps.iterations,
    )
    miss_pad = BinaryFit(
        link=miss.link, coefficients=miss.coefficients,
        fitted_probs=np.append(miss.fitted_probs, 0.5),
        scores=pad(miss.scores),
        information=pad(miss.scores).T @ pad(miss.scores) / (ds.n_rows + 1),
        converged=True, iterations=miss.iterations,
    )
    v_pad = sandwich_theta(fit_pad, ps_pad, miss_pad, "adjusted")
    np.testing.assert_allclose(v_pad.covariance, v.covariance, rtol=1e-8)


def test_ate_variance_degenerate_exact_fit():
    # outcomes exactly linear and identical across arms: zero variance
    n = 60
    x = np.linspace(-1, 2, n)
    y = 1.0 + 2.0 * x
    w = (np.arange(n) % 2).astype(int)
    ds = Dataset.from_arrays(y, w, np.ones(n, dtype=int), x[:, None])
    ws = weights_from_probabilities(ds, np.full(n, 0.5), np.full(n, 0.8), "d_weighted")
    fit1 = solve_weighted_ls(ds, ws, 1)
    fit0 = solve_weighted_ls(ds, ws, 0)
    ps = BinaryFit("logit", np.zeros(2), np.full(n, 0.5),
                   np.zeros((n, 2)), np.eye(2), True, 1)
    miss = BinaryFit("logit", np.zeros(2), np.full(n, 0.8),
                     np.zeros((n, 2)), np.eye(2), True, 1)
    var = ate_variance(fit1, fit0, ps, miss, ds, mean_mode="correct_mean")
    assert var.covariance[0, 0] == pytest.approx(0.0, abs=1e-12)


def test_ate_variance_modes_differ(rng):
    ds, ps, miss, ws, fit1, fit0 = _fitted(rng, n=500)
    v_corr = ate_variance(fit1, fit0, ps, miss, ds, mean_mode="correct_mean")
    v_miss = ate_variance(fit1, fit0, ps, miss, ds, mean_mode="misspecified_mean")
    assert v_corr.scalar_se() > 0 and v_miss.scalar_se() > 0
    assert v_corr.covariance[0, 0] != pytest.approx(v_miss.covariance[0, 0], rel=1e-12)
    with pytest.raises(ConfigError):
        ate_variance(fit1, fit0, ps, miss, ds, mean_mode="banana")


def _simple_pipeline(ds):
    ps, miss = fit_propensity(ds), fit_missingness(ds)
    ws = compute_weights(ps, miss, ds, "d_weighted")
    fit1 = solve_weighted_ls(ds, ws, 1)
    fit0 = solve_weighted_ls(ds, ws, 0)
    X = ds.covariates
    return float((X @ fit1.theta - X @ fit0.theta).mean())


def test_bootstrap_deterministic(rng):
    ds = synthetic_dataset(rng, n=250)
    a = pairs_bootstrap(ds, _simple_pipeline, 25, seed=99)
    b = pairs_bootstrap(ds, _simple_pipeline, 25, seed=99)
    assert a.scalar_se() == b.scalar_se()
    c = pairs_bootstrap(ds, _simple_pipeline, 25, seed=100)
    assert a.scalar_se() != c.scalar_se()


def test_bootstrap_workers_do_not_change_result(rng):
    ds = synthetic_dataset(rng, n=200)
    a = pairs_bootstrap(ds, _simple_pipeline, 12, seed=7, n_jobs=1)
    b = pairs_bootstrap(ds, _simple_pipeline, 12, seed=7, n_jobs=2)
    assert a.scalar_se() == pytest.approx(b.scalar_se(), abs=0)


def test_bootstrap_degenerate_rows_give_zero_sd():
    n = 30
    ds = Dataset.from_arrays(
        np.full(n, 2.5), np.tile([0, 1], 15), np.ones(n, dtype=int), np.ones((n, 1))
    )

    def mean_diff(d):
        y = d.outcome_filled(0.0)
        return float(y[d.treatment == 1].mean() - y[d.treatment == 0].mean())

    v = pairs_bootstrap(ds, mean_diff, 10, seed=1)
    assert v.scalar_se() == pytest.approx(0.0, abs=1e-15)


def test_bootstrap_failures_raise_reliability(rng):
    from dwmest.errors import EstimationInfeasibleError

    ds = synthetic_dataset(rng, n=100)

    def always_fails(d):
        raise EstimationInfeasibleError("boom")

    with pytest.raises(ReliabilityError):
        pairs_bootstrap(ds, always_fails, 10, seed=3)


def test_efficiency_report_registry_mismatch():
    with pytest.raises(ConfigError):
        efficiency_report({"a": np.ones(5)}, {"b": np.ones(5)})
    with pytest.raises(ConfigError):
        efficiency_report({"a": np.ones(5)}, {"a": np.ones(6)})


def test_efficiency_report_verdicts(rng):
    est = {"t": rng.normal(0, 1.0, 400)}
    known = {"t": rng.normal(0, 1.3, 400)}
    rep = efficiency_report(
        est, known,
        unweighted_ate=rng.normal(0, 1.0, 400),
        dweighted_ate=rng.normal(0, 1.4, 400),
        eigmin_sigma_minus_omega=np.array([0.0, 1e-12, 3e-9]),
    )
    assert rep["corollary1_pass"]
    assert rep["corollary3"]["pass"]
    assert rep["psd_check"]["pass"]
