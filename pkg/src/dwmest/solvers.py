"""Weighted second-step solvers and the stacked one-step GMM.

Three objective families share a common fit record: exact weighted
least squares, canonical-link GLM QMLE solved by Newton, and weighted
quantile regression solved as an exact linear program. Scores follow
one sign convention throughout: they are gradients of the minimized
objective, so converged fits have (numerically) zero column-mean
scores and positive-definite Hessian estimates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.optimize
from scipy import sparse
from scipy.special import expit

from .binary import _norm_pdf, fit_binary_response, link_functions
from .data import Dataset
from .errors import (
    ConfigError,
    ConvergenceError,
    EstimationInfeasibleError,
    RankError,
    SchemaError,
)
from .weights import WeightSet

NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 100

GLM_FAMILIES = ("gaussian_identity", "bernoulli_logit", "poisson_log")


@dataclass(frozen=True)
class ObjectiveKind:
    """Tag for a second-step objective.

    kind is one of "least_squares", "glm_qmle", "quantile",
    "binary_qmle". glm_qmle carries a canonical family so its FOC
    reduces to X'(y - h(X theta)) = 0; binary_qmle carries a link for
    the non-canonical Bernoulli mean fit used when the CEF itself is a
    probit.
    """

    kind: str
    family: str = ""
    tau: float = 0.0
    link: str = ""

    def __post_init__(self):
        if self.kind == "glm_qmle" and self.family not in GLM_FAMILIES:
            raise ConfigError(f"unknown GLM family '{self.family}'")
        if self.kind == "quantile" and not 0.0 < self.tau < 1.0:
            raise ConfigError(f"tau must be strictly inside (0,1), got {self.tau}")
        if self.kind == "binary_qmle" and self.link not in ("logit", "probit"):
            raise ConfigError(f"binary_qmle needs a logit or probit link, got '{self.link}'")
        if self.kind not in ("least_squares", "glm_qmle", "quantile", "binary_qmle"):
            raise ConfigError(f"unknown objective kind '{self.kind}'")

    def label(self) -> str:
        if self.kind == "glm_qmle":
            return f"glm_qmle[{self.family}]"
        if self.kind == "quantile":
            return f"quantile[{self.tau:g}]"
        if self.kind == "binary_qmle":
            return f"binary_qmle[{self.link}]"
        return self.kind


def _family_mean(family: str):
    """(h, h') for a canonical-link family."""
    if family == "gaussian_identity":
        return (lambda z: z, lambda z: np.ones_like(z))
    if family == "bernoulli_logit":
        return (expit, lambda z: expit(z) * (1.0 - expit(z)))
    if family == "poisson_log":
        return (np.exp, np.exp)
    raise ConfigError(f"unknown GLM family '{family}'")


def _family_link(family: str):
    """Inverse of h, used only to build the Newton starting point."""
    if family == "gaussian_identity":
        return lambda m: m
    if family == "bernoulli_logit":
        return lambda m: np.log(m / (1.0 - m))
    if family == "poisson_log":
        return np.log
    raise ConfigError(f"unknown GLM family '{family}'")


@dataclass(frozen=True)
class MEstimateFit:
    """Solution of one arm's weighted second-step problem."""

    arm: int
    objective: ObjectiveKind
    theta: np.ndarray
    row_scores: np.ndarray  # (N, P); zero off-arm, unobserved, trimmed
    hessian: np.ndarray  # (P, P)
    objective_value: float
    n_effective: int
    converged: bool = True
    iterations: int = 0

    def predict_mean(self, X) -> np.ndarray:
        """Fitted conditional mean on new design rows (mean-type fits)."""
        X = np.asarray(X, dtype=float)
        z = X @ self.theta
        if self.objective.kind in ("least_squares",):
            return z
        if self.objective.kind == "glm_qmle":
            h, _ = _family_mean(self.objective.family)
            return h(z)
        if self.objective.kind == "binary_qmle":
            cdf, _ = link_functions(self.objective.link)
            return cdf(z)
        raise ConfigError("predict_mean is undefined for a quantile objective")

    def predict_index(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.theta


def _effective(ds: Dataset, ws: WeightSet, arm: int):
    if ws.n_rows != ds.n_rows:
        raise SchemaError("weight set is not aligned with the dataset")
    w = ws.effective(arm)
    y = ds.outcome_filled(0.0)
    return w, y


def solve_weighted_ls(ds: Dataset, ws: WeightSet, arm: int) -> MEstimateFit:
    """Exact weighted normal-equations solve for one arm."""
    w, y = _effective(ds, ws, arm)
    X = ds.covariates
    keep = w > 0
    if not keep.any():
        raise EstimationInfeasibleError(f"arm {arm}: no rows with positive weight")
    Xk, yk, wk = X[keep], y[keep], w[keep]
    gram = (Xk * wk[:, None]).T @ Xk
    rhs = (Xk * wk[:, None]).T @ yk
    try:
        theta = scipy.linalg.solve(gram, rhs, assume_a="sym")
    except scipy.linalg.LinAlgError as exc:
        raise RankError(f"weighted Gram matrix is singular: {exc}") from exc
    if not np.all(np.isfinite(theta)):
        raise RankError("weighted Gram matrix is numerically singular")
    resid = X @ theta - y
    scores = X * (w * resid)[:, None]
    hessian = (X * w[:, None]).T @ X / ds.n_rows
    value = 0.5 * float(np.dot(w, (y - X @ theta) ** 2))
    return MEstimateFit(
        arm=arm,
        objective=ObjectiveKind("least_squares"),
        theta=theta,
        row_scores=scores,
        hessian=hessian,
        objective_value=value,
        n_effective=int(keep.sum()),
    )


def _glm_quasi_loglik(family, y, z, w):
    if family == "gaussian_identity":
        return -0.5 * float(np.dot(w, (y - z) ** 2))
    if family == "bernoulli_logit":
        # y*log(p)+(1-y)*log(1-p) written stably in the index
        return float(np.dot(w, y * z - np.logaddexp(0.0, z)))
    if family == "poisson_log":
        return float(np.dot(w, y * z - np.exp(z)))
    raise ConfigError(family)


def glm_newton_raw(Xk, yk, wk, family: str, n_rows: int = None):
    """Newton with step halving on the weighted canonical-link FOC.

    Operates on already-filtered rows (positive weights). Starts from
    the weighted gaussian fit pushed through the link. Returns
    (theta, iterations).
    """
    h, hprime = _family_mean(family)
    link = _family_link(family)
    n = n_rows if n_rows is not None else len(yk)
    gram = (Xk * wk[:, None]).T @ Xk
    try:
        theta_ls = scipy.linalg.solve(gram, (Xk * wk[:, None]).T @ yk, assume_a="sym")
    except scipy.linalg.LinAlgError as exc:
        raise RankError(f"singular weighted Gram matrix: {exc}") from exc
    if family == "gaussian_identity":
        return theta_ls, 0
    mu0 = Xk @ theta_ls
    if family == "bernoulli_logit":
        mu0 = np.clip(mu0, 0.02, 0.98)
    else:
        mu0 = np.maximum(mu0, max(1e-3, 1e-3 * float(np.abs(yk).mean() or 1.0)))
    theta = scipy.linalg.solve(gram, (Xk * wk[:, None]).T @ link(mu0), assume_a="sym")

    scale = max(1.0, float(wk.sum()) / n)
    ll = _glm_quasi_loglik(family, yk, Xk @ theta, wk)
    converged = False
    it = 0
    for it in range(1, NEWTON_MAX_ITER + 1):
        z = Xk @ theta
        grad = Xk.T @ (wk * (yk - h(z))) / n
        if np.max(np.abs(grad)) <= NEWTON_TOL * scale:
            converged = True
            break
        H = (Xk * (wk * hprime(z))[:, None]).T @ Xk / n
        try:
            step = scipy.linalg.solve(H, grad, assume_a="sym")
        except scipy.linalg.LinAlgError as exc:
            raise RankError(f"singular GLM Hessian at iteration {it}: {exc}") from exc
        t = 1.0
        while t > 1e-12:
            cand = theta + t * step
            ll_new = _glm_quasi_loglik(family, yk, Xk @ cand, wk)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                theta, ll = cand, ll_new
                break
            t *= 0.5
        else:
            break
    if not converged:
        z = Xk @ theta
        if np.max(np.abs(Xk.T @ (wk * (yk - h(z))) / n)) <= NEWTON_TOL * scale:
            converged = True
    if not converged:
        raise ConvergenceError(
            f"GLM Newton did not converge in {NEWTON_MAX_ITER} iterations",
            last_iterate=theta,
            iterations=it,
        )
    return theta, it


def solve_weighted_glm(ds: Dataset, ws: WeightSet, arm: int, family: str) -> MEstimateFit:
    """Canonical-link weighted QMLE: solves sum w x'(y - h(x theta)) = 0.

    gaussian_identity delegates to the exact least-squares solve (same
    FOC); the others run Newton with step halving starting from the
    gaussian fit pushed through the link.
    """
    if family == "gaussian_identity":
        ls = solve_weighted_ls(ds, ws, arm)
        return MEstimateFit(
            arm=arm,
            objective=ObjectiveKind("glm_qmle", family=family),
            theta=ls.theta,
            row_scores=ls.row_scores,
            hessian=ls.hessian,
            objective_value=ls.objective_value,
            n_effective=ls.n_effective,
        )
    h, hprime = _family_mean(family)
    w, y = _effective(ds, ws, arm)
    X = ds.covariates
    keep = w > 0
    if not keep.any():
        raise EstimationInfeasibleError(f"arm {arm}: no rows with positive weight")
    yk = y[keep]
    if family == "bernoulli_logit" and np.any((yk < 0) | (yk > 1)):
        raise SchemaError("bernoulli_logit requires outcomes in [0, 1]")
    if family == "poisson_log" and np.any(yk < 0):
        raise SchemaError("poisson_log requires nonnegative outcomes")

    theta, it = glm_newton_raw(X[keep], yk, w[keep], family, n_rows=ds.n_rows)
    n = ds.n_rows
    zf = X @ theta
    scores = X * (w * (h(zf) - y))[:, None]
    hessian = (X * (w * hprime(zf))[:, None]).T @ X / n
    return MEstimateFit(
        arm=arm,
        objective=ObjectiveKind("glm_qmle", family=family),
        theta=theta,
        row_scores=scores,
        hessian=hessian,
        objective_value=-_glm_quasi_loglik(family, yk, zf[keep], w[keep]),
        n_effective=int(keep.sum()),
        iterations=it,
    )


def solve_weighted_binary_qmle(ds: Dataset, ws: WeightSet, arm: int, link: str = "probit") -> MEstimateFit:
    """Weighted Bernoulli QMLE with a (possibly non-canonical) link.

    Used when the conditional mean itself is a probit; reuses the
    binary-response Newton engine with per-row weights. The Hessian is
    the exact sample Jacobian of the weighted score, valid under
    misspecification.
    """
    w, y = _effective(ds, ws, arm)
    keep = w > 0
    if not keep.any():
        raise EstimationInfeasibleError(f"arm {arm}: no rows with positive weight")
    if np.any((y[keep] < 0) | (y[keep] > 1)):
        raise SchemaError("binary_qmle requires outcomes in [0, 1]")
    bf = fit_binary_response(ds.covariates[keep], y[keep], link=link, weights=w[keep])
    theta = bf.coefficients

    X = ds.covariates
    cdf, pdf = link_functions(link)
    z = X @ theta
    F = cdf(z)
    f = pdf(z)
    Fc = np.clip(F, 1e-12, 1.0 - 1e-12)
    v = Fc * (1.0 - Fc)
    lam = f / v
    scores = X * (w * lam * (F - y))[:, None]
    if link == "probit":
        fprime = -z * f
    else:
        fprime = f * (1.0 - 2.0 * F)
    lam_prime = (fprime * v - f * f * (1.0 - 2.0 * F)) / (v * v)
    jac_w = w * (lam_prime * (F - y) + lam * f)
    hessian = (X * jac_w[:, None]).T @ X / ds.n_rows
    yk, wk = y[keep], w[keep]
    Fk = Fc[keep]
    value = -float(np.dot(wk, yk * np.log(Fk) + (1.0 - yk) * np.log1p(-Fk)))
    return MEstimateFit(
        arm=arm,
        objective=ObjectiveKind("binary_qmle", link=link),
        theta=theta,
        row_scores=scores,
        hessian=hessian,
        objective_value=value,
        n_effective=int(keep.sum()),
        iterations=bf.iterations,
    )


def check_loss(u, tau):
    return u * (tau - (u < 0))


def weighted_quantile(values, weights, tau: float) -> float:
    """Smallest order statistic whose cumulative normalized weight reaches tau.

    Matches the intercept-only quantile-regression LP including its
    lexicographic tie-break.
    """
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    keep = weights > 0
    if not keep.any():
        raise EstimationInfeasibleError("weighted quantile of an all-zero-weight sample")
    v, w = values[keep], weights[keep]
    order = np.argsort(v, kind="stable")
    v, w = v[order], w[order]
    cum = np.cumsum(w)
    target = tau * cum[-1]
    j = int(np.searchsorted(cum, target * (1.0 - 1e-12), side="left"))
    return float(v[min(j, len(v) - 1)])


def _qr_linprog(Xk, yk, wk, tau, extra_cost=None, loss_cap=None):
    """One HiGHS solve of the primal QR LP (residual splitting)."""
    m, k = Xk.shape
    cost = np.concatenate([np.zeros(k), tau * wk, (1.0 - tau) * wk])
    A_eq = sparse.hstack(
        [sparse.csr_matrix(Xk), sparse.eye(m, format="csr"), -sparse.eye(m, format="csr")],
        format="csr",
    )
    bounds = [(None, None)] * k + [(0.0, None)] * (2 * m)
    A_ub = b_ub = None
    obj = cost
    if extra_cost is not None:
        obj = extra_cost
        A_ub = sparse.csr_matrix(cost[None, :])
        b_ub = np.array([loss_cap])
    res = scipy.optimize.linprog(
        obj, A_eq=A_eq, b_eq=yk, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs-ds"
    )
    if res.status != 0:
        raise AssertionError(f"QR linear program failed unexpectedly: {res.message}")
    return res.x[:k]


def solve_weighted_qr(ds: Dataset, ws: WeightSet, arm: int, tau: float, outcome=None) -> MEstimateFit:
    """Weighted quantile regression as an exact LP (vertex solution).

    Among interval-valued optima the smallest vertex in lexicographic
    coefficient order is returned, via a second solve restricted to the
    optimal face. `outcome` overrides the regression outcome (the
    log-outcome route of the exponential conditional quantile model).
    """
    objective = ObjectiveKind("quantile", tau=tau)
    w = ws.effective(arm)
    y = ds.outcome_filled(0.0) if outcome is None else np.where(ds.observed == 1, outcome, 0.0)
    X = ds.covariates
    keep = w > 0
    m = int(keep.sum())
    if m == 0:
        raise EstimationInfeasibleError(f"arm {arm}: no rows with positive weight")
    if m < X.shape[1]:
        raise EstimationInfeasibleError(
            f"arm {arm}: {m} weighted rows cannot identify {X.shape[1]} coefficients"
        )
    Xk, yk, wk = X[keep], y[keep], w[keep]

    theta = _qr_linprog(Xk, yk, wk, tau)
    loss1 = float(np.dot(wk, check_loss(yk - Xk @ theta, tau)))

    # tie-break pass: lexicographically smallest vertex on the optimal face
    k = X.shape[1]
    lex = np.concatenate([8.0 ** (-np.arange(k)), np.zeros(2 * m)])
    cap = loss1 + 1e-9 * max(1.0, abs(loss1))
    try:
        theta2 = _qr_linprog(Xk, yk, wk, tau, extra_cost=lex, loss_cap=cap)
        loss2 = float(np.dot(wk, check_loss(yk - Xk @ theta2, tau)))
        if loss2 <= loss1 + 1e-10 * max(1.0, abs(loss1)):
            theta, loss1 = theta2, min(loss1, loss2)
    except AssertionError:
        pass  # keep the first vertex; tie-break is best-effort refinement

    resid = y - X @ theta
    scores = X * (w * ((resid < 0) - tau))[:, None]
    hessian = _powell_hessian(Xk, yk - Xk @ theta, wk, ds.n_rows)
    return MEstimateFit(
        arm=arm,
        objective=objective,
        theta=theta,
        row_scores=scores,
        hessian=hessian,
        objective_value=loss1,
        n_effective=m,
    )


def _powell_hessian(Xk, resid, wk, n_rows):
    """Kernel-smoothed Jacobian of the QR score (Powell's estimator)."""
    wsum = wk.sum()
    mean = np.average(resid, weights=wk)
    sd = np.sqrt(max(np.average((resid - mean) ** 2, weights=wk), 1e-300))
    h = max(1.06 * sd * wsum ** (-0.2), 1e-8 * max(sd, 1.0))
    dens = _norm_pdf(resid / h) / h
    return (Xk * (wk * dens)[:, None]).T @ Xk / n_rows


@dataclass(frozen=True)
class StackedFit:
    """Joint root of the stacked first/second-step moment system."""

    theta_control: np.ndarray
    theta_treated: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray
    converged: bool
    moment_norm: float


def solve_stacked_gmm(
    ds: Dataset,
    objective: ObjectiveKind = ObjectiveKind("least_squares"),
    ps_spec=None,
    miss_spec=None,
    ps_link: str = "logit",
    miss_link: str = "logit",
) -> StackedFit:
    """One-step GMM on the exactly identified stacked moment system.

    Moments: the two doubly weighted second-step FOCs and the two
    binary-response score vectors. Exact identification makes the
    one-step root equal to sequential two-step estimation; positive
    rescalings of individual moment blocks do not move the root.
    """
    if objective.kind == "least_squares":
        h, hprime = _family_mean("gaussian_identity")
    elif objective.kind == "glm_qmle":
        h, hprime = _family_mean(objective.family)
    else:
        raise ConfigError("stacked GMM supports smooth mean-type objectives only")

    from .binary import _resolve_columns  # local import to avoid cycle noise

    X = ds.covariates
    Z = ds.augmented_design()
    ps_idx, _ = _resolve_columns(list(ds.covariate_names), ps_spec)
    miss_idx, _ = _resolve_columns(list(ds.augmented_names()), miss_spec)
    Xg = X[:, ps_idx]
    Zm = Z[:, miss_idx]
    Wv = ds.treatment.astype(float)
    Sv = ds.observed.astype(float)
    y = ds.outcome_filled(0.0)
    n = ds.n_rows
    p = X.shape[1]
    kg, kd = Xg.shape[1], Zm.shape[1]

    g_cdf, g_pdf = link_functions(ps_link)
    r_cdf, r_pdf = link_functions(miss_link)

    def moments(params):
        th0 = params[:p]
        th1 = params[p : 2 * p]
        gam = params[2 * p : 2 * p + kg]
        dlt = params[2 * p + kg :]
        G = np.clip(g_cdf(Xg @ gam), 1e-12, 1 - 1e-12)
        R = np.clip(r_cdf(Zm @ dlt), 1e-12, 1 - 1e-12)
        om0 = Sv * (1.0 - Wv) / (R * (1.0 - G))
        om1 = Sv * Wv / (R * G)
        m0 = X.T @ (om0 * (y - h(X @ th0))) / n
        m1 = X.T @ (om1 * (y - h(X @ th1))) / n
        zg = Xg @ gam
        lam_g = g_pdf(zg) / (G * (1.0 - G))
        m2 = Xg.T @ (lam_g * (Wv - G)) / n
        zr = Zm @ dlt
        lam_r = r_pdf(zr) / (R * (1.0 - R))
        m3 = Zm.T @ (lam_r * (Sv - R)) / n
        return np.concatenate([m0, m1, m2, m3])

    start = np.zeros(2 * p + kg + kd)
    link_fn = _family_link(objective.family or "gaussian_identity")
    for g, sl in ((0, slice(0, p)), (1, slice(p, 2 * p))):
        rows = (ds.observed == 1) & (ds.treatment == g)
        if not rows.any():
            raise EstimationInfeasibleError(f"arm {g} has no observed rows")
        ybar = float(y[rows].mean())
        if objective.kind == "glm_qmle" and objective.family == "bernoulli_logit":
            ybar = min(max(ybar, 0.02), 0.98)
        elif objective.kind == "glm_qmle" and objective.family == "poisson_log":
            ybar = max(ybar, 1e-3)
        start[sl][0] = link_fn(ybar)

    sol = scipy.optimize.root(moments, start, method="hybr", tol=1e-12)
    norm = float(np.max(np.abs(sol.fun)))
    if not sol.success and norm > 1e-8:
        if "singular" in sol.message.lower():
            raise RankError(f"stacked GMM Jacobian singular: {sol.message}")
        raise ConvergenceError(
            f"stacked GMM root finding failed: {sol.message}",
            last_iterate=sol.x,
            iterations=int(sol.nfev),
        )
    x = sol.x
    return StackedFit(
        theta_control=x[:p],
        theta_treated=x[p : 2 * p],
        gamma=x[2 * p : 2 * p + kg],
        delta=x[2 * p + kg :],
        converged=True,
        moment_norm=norm,
    )
