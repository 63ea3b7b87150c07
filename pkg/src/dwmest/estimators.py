"""scikit-learn style front door for the two-step estimator.

These classes wrap the functional pipeline (first-stage probability
fits, composite weights, trimming, weighted second step, effects,
standard errors) behind fit/predict/get_params so the estimator
composes with the wider ecosystem. The treatment and observability
indicators travel as fit keyword arguments, mirroring sample_weight.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .binary import fit_missingness, fit_propensity
from .data import Dataset
from .effects import ate_pooled, ate_separate, uqte_direct, uqte_rif, RifConfig
from .errors import ConfigError
from .inference import ate_variance, pairs_bootstrap
from .solvers import solve_weighted_binary_qmle, solve_weighted_glm, solve_weighted_ls
from .weights import compute_weights, trim

MEAN_MODELS = ("linear", "logit", "probit", "poisson")


def _build_dataset(X, y, treatment, observed):
    X = check_array(X, dtype=float, ensure_2d=True)
    y = np.asarray(y, dtype=float).ravel()
    treatment = np.asarray(treatment).ravel()
    observed = (~np.isnan(y)).astype(int) if observed is None else np.asarray(observed).ravel()
    return Dataset.from_arrays(y, treatment, observed, X)


def _solve_arm(ds, ws, arm, mean_model):
    if mean_model == "linear":
        return solve_weighted_ls(ds, ws, arm)
    if mean_model == "logit":
        return solve_weighted_glm(ds, ws, arm, "bernoulli_logit")
    if mean_model == "poisson":
        return solve_weighted_glm(ds, ws, arm, "poisson_log")
    if mean_model == "probit":
        return solve_weighted_binary_qmle(ds, ws, arm, link="probit")
    raise ConfigError(f"mean_model must be one of {MEAN_MODELS}, got '{mean_model}'")


class DoublyWeightedATE(BaseEstimator):
    """Average treatment effect with double inverse-probability weighting.

    Parameters
    ----------
    variant : "d_weighted", "ps_weighted" or "unweighted".
    mean_model : functional form of the second-step conditional mean.
    pooled : fit one model with a treatment dummy instead of separate
        slopes per arm.
    ps_link, miss_link : first-stage link functions.
    ps_columns, miss_columns : column subsets (names or indices) for the
        two probability models; None uses every column.
    trim_bounds : composite-probability support band; rows outside are
        dropped before the second step.
    se : "analytic", "bootstrap", or None.
    se_mean_mode : which analytic ATE variance applies ("correct_mean"
        or "misspecified_mean"); there is no safe default guess, so the
        choice is explicit.
    """

    def __init__(
        self,
        variant="d_weighted",
        mean_model="linear",
        pooled=False,
        ps_link="logit",
        miss_link="logit",
        ps_columns=None,
        miss_columns=None,
        trim_bounds=(0.0, 1.0),
        se="analytic",
        se_mean_mode="misspecified_mean",
        bootstrap_reps=200,
        random_state=0,
    ):
        self.variant = variant
        self.mean_model = mean_model
        self.pooled = pooled
        self.ps_link = ps_link
        self.miss_link = miss_link
        self.ps_columns = ps_columns
        self.miss_columns = miss_columns
        self.trim_bounds = trim_bounds
        self.se = se
        self.se_mean_mode = se_mean_mode
        self.bootstrap_reps = bootstrap_reps
        self.random_state = random_state

    def _pipeline(self, ds):
        ps = fit_propensity(ds, spec=self.ps_columns, link=self.ps_link)
        miss = fit_missingness(ds, spec=self.miss_columns, link=self.miss_link)
        ws = compute_weights(ps, miss, ds, self.variant)
        lo, hi = self.trim_bounds
        if (lo, hi) != (0.0, 1.0):
            ws = trim(ws, lo, hi)
        if self.pooled:
            family = {"linear": "gaussian_identity", "logit": "bernoulli_logit", "poisson": "poisson_log"}.get(self.mean_model)
            if family is None:
                raise ConfigError("pooled fits need a canonical-link mean_model")
            eff = ate_pooled(ds, ws, family)
            return ps, miss, ws, None, None, eff
        fit1 = _solve_arm(ds, ws, 1, self.mean_model)
        fit0 = _solve_arm(ds, ws, 0, self.mean_model)
        keep = np.flatnonzero(ws.trim_mask)
        eff = ate_separate(fit1, fit0, ds, keep=keep, variant=self.variant)
        return ps, miss, ws, fit1, fit0, eff

    def fit(self, X, y, treatment=None, observed=None):
        if treatment is None:
            raise ConfigError("fit requires the treatment indicator")
        ds = _build_dataset(X, y, treatment, observed)
        self.ds_ = ds
        ps, miss, ws, fit1, fit0, eff = self._pipeline(ds)
        self.ps_fit_, self.miss_fit_, self.weights_ = ps, miss, ws
        self.fit_treated_, self.fit_control_ = fit1, fit0
        self.effect_ = eff
        self.ate_ = eff.point
        self.n_effective_ = ws.n_effective
        self.n_features_in_ = X.shape[1] if hasattr(X, "shape") else ds.n_covariates - 1
        self.se_ = None
        if self.se == "analytic":
            if self.pooled:
                raise ConfigError("analytic standard errors cover separate-slopes fits; "
                                  "use se='bootstrap' with pooled=True")
            var = ate_variance(
                fit1, fit0, ps, miss, ds,
                mean_mode=self.se_mean_mode,
                rows=np.flatnonzero(ws.trim_mask),
            )
            self.se_ = var.scalar_se()
            self.variance_ = var
        elif self.se == "bootstrap":
            def point(rep_ds):
                return self._pipeline(rep_ds)[-1].point

            var = pairs_bootstrap(ds, point, self.bootstrap_reps, self.random_state)
            self.se_ = var.scalar_se()
            self.variance_ = var
        elif self.se is not None:
            raise ConfigError("se must be 'analytic', 'bootstrap', or None")
        return self

    def predict(self, X):
        """Per-row predicted effect m(x, theta1) - m(x, theta0)."""
        check_is_fitted(self, "ate_")
        if self.fit_treated_ is None:
            raise ConfigError("per-row effects need separate-slopes fits (pooled=False)")
        X = check_array(X, dtype=float, ensure_2d=True)
        if X.shape[1] == self.ds_.n_covariates - 1:
            X = np.column_stack([np.ones(len(X)), X])
        return self.fit_treated_.predict_mean(X) - self.fit_control_.predict_mean(X)


class DoublyWeightedQTE(BaseEstimator):
    """Unconditional quantile treatment effects with double weighting.

    method "direct" runs weighted intercept-only quantile regressions;
    "rif" runs the recentered-influence-function regression route.
    Standard errors are bootstrap-only.
    """

    def __init__(
        self,
        taus=(0.25, 0.5, 0.75),
        method="direct",
        variant="d_weighted",
        ps_link="logit",
        miss_link="logit",
        ps_columns=None,
        miss_columns=None,
        trim_bounds=(0.0, 1.0),
        bandwidth=None,
        se=None,
        bootstrap_reps=200,
        random_state=0,
    ):
        self.taus = taus
        self.method = method
        self.variant = variant
        self.ps_link = ps_link
        self.miss_link = miss_link
        self.ps_columns = ps_columns
        self.miss_columns = miss_columns
        self.trim_bounds = trim_bounds
        self.bandwidth = bandwidth
        self.se = se
        self.bootstrap_reps = bootstrap_reps
        self.random_state = random_state

    def _effects(self, ds):
        ps = fit_propensity(ds, spec=self.ps_columns, link=self.ps_link)
        miss = fit_missingness(ds, spec=self.miss_columns, link=self.miss_link)
        ws = compute_weights(ps, miss, ds, self.variant)
        lo, hi = self.trim_bounds
        if (lo, hi) != (0.0, 1.0):
            ws = trim(ws, lo, hi)
        out = {}
        for tau in self.taus:
            if self.method == "direct":
                out[tau] = uqte_direct(ds, ws, tau)
            elif self.method == "rif":
                out[tau] = uqte_rif(ds, ws, tau, RifConfig(tau=tau, bandwidth=self.bandwidth))
            else:
                raise ConfigError(f"method must be 'direct' or 'rif', got '{self.method}'")
        return ps, miss, ws, out

    def fit(self, X, y, treatment=None, observed=None):
        if treatment is None:
            raise ConfigError("fit requires the treatment indicator")
        ds = _build_dataset(X, y, treatment, observed)
        self.ds_ = ds
        ps, miss, ws, effects = self._effects(ds)
        self.ps_fit_, self.miss_fit_, self.weights_ = ps, miss, ws
        self.effects_ = effects
        self.qte_ = {tau: eff.point for tau, eff in effects.items()}
        self.se_ = None
        if self.se == "bootstrap":
            def points(rep_ds):
                return np.array([eff.point for eff in self._effects(rep_ds)[-1].values()])

            var = pairs_bootstrap(ds, points, self.bootstrap_reps, self.random_state)
            self.se_ = {tau: float(s) for tau, s in zip(self.taus, var.se)}
            self.variance_ = var
        elif self.se is not None:
            raise ConfigError("se must be 'bootstrap' or None")
        return self
