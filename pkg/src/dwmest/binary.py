"""First-step binary-response maximum likelihood.

Fits the treatment propensity and the missing-outcome probability by
Newton-Raphson (Fisher scoring with step halving) under a logit or
probit link, keeping the per-row score vectors and the outer-product
information matrix that the variance adjustment needs. The same engine,
with per-row weights, also serves the second-step Bernoulli QMLE with a
non-canonical link.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .data import Dataset, _check_full_rank
from .errors import ConvergenceError, RankError, SchemaError, SeparationError

PROB_CLIP = 1e-6
SCORE_TOL = 1e-8
MAX_ITER = 100

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _logit_cdf(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _norm_pdf(z):
    return np.exp(-0.5 * z * z) * _INV_SQRT_2PI


def link_functions(link: str):
    """(cdf, pdf) pair for a named link; cdf strictly increasing onto (0,1)."""
    if link == "logit":
        return _logit_cdf, lambda z: _logit_cdf(z) * (1.0 - _logit_cdf(z))
    if link == "probit":
        return ndtr, _norm_pdf
    raise SchemaError(f"unknown link '{link}' (expected 'logit' or 'probit')")


@dataclass(frozen=True)
class BinaryFit:
    """Fitted binary-response model with score-level detail.

    scores holds the per-row log-likelihood gradient contributions at
    the estimate; information is their sample outer-product average.
    fitted_probs are clipped to (PROB_CLIP, 1-PROB_CLIP) before any
    downstream division, the scores are not.
    """

    link: str
    coefficients: np.ndarray
    fitted_probs: np.ndarray
    scores: np.ndarray
    information: np.ndarray
    converged: bool
    iterations: int
    design_columns: tuple = field(default=())

    @property
    def n_clipped(self) -> int:
        return int(
            np.sum((self.fitted_probs <= PROB_CLIP) | (self.fitted_probs >= 1.0 - PROB_CLIP))
        )

    def to_dict(self) -> dict:
        return {
            "link": self.link,
            "coefficients": self.coefficients.tolist(),
            "design_columns": list(self.design_columns),
            "converged": self.converged,
            "iterations": self.iterations,
            "n_clipped": self.n_clipped,
        }


def _bernoulli_loglik(y, p, w):
    p = np.clip(p, 1e-300, 1.0 - 1e-16)
    ll = y * np.log(p) + (1.0 - y) * np.log1p(-p)
    return float(np.dot(w, ll))


def fit_binary_response(
    design,
    response,
    link: str = "logit",
    weights=None,
    tol: float = SCORE_TOL,
    max_iter: int = MAX_ITER,
    design_columns=(),
) -> BinaryFit:
    """Maximize the (weighted) Bernoulli log likelihood by Newton-Raphson.

    Deterministic: starts at zero coefficients, Fisher-scoring steps
    with step halving on the log likelihood, stops when the mean score
    sup-norm falls below `tol` (scaled by the mean weight so rescaling
    weights cannot change the solution path).
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    n, k = X.shape
    if y.shape != (n,):
        raise SchemaError(f"response has shape {y.shape}, expected ({n},)")
    if np.any((y < 0) | (y > 1)):
        raise SchemaError("response values must lie in [0, 1]")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise SchemaError("weights must be finite and nonnegative")
    active = w > 0
    if not active.any():
        raise SeparationError("all weights are zero")
    ybar = np.average(y, weights=w)
    if ybar <= 0.0 or ybar >= 1.0:
        raise SeparationError(f"response is constant (weighted mean {ybar:g})")
    _check_full_rank(X[active])

    cdf, pdf = link_functions(link)
    scale = max(1.0, float(w.mean()))
    beta = np.zeros(k)
    ll = _bernoulli_loglik(y, cdf(X @ beta), w)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        z = X @ beta
        p = cdf(z)
        f = pdf(z)
        pc = np.clip(p, 1e-12, 1.0 - 1e-12)
        lam = f / (pc * (1.0 - pc))
        grad = X.T @ (w * lam * (y - p)) / n
        at_tol = np.max(np.abs(grad)) <= tol * scale
        info_w = w * f * f / (pc * (1.0 - pc))
        H = (X * info_w[:, None]).T @ X / n
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError as exc:
            if at_tol:
                converged = True
                break
            raise RankError(f"singular Hessian at iteration {it}: {exc}") from exc
        if at_tol:
            # one polishing step: quadratic convergence pushes the FOC
            # (and the canonical-link mean fit) to machine precision
            cand = beta + step
            if _bernoulli_loglik(y, cdf(X @ cand), w) >= ll - 1e-12 * abs(ll):
                beta = cand
            converged = True
            break
        t = 1.0
        while t > 1e-12:
            cand = beta + t * step
            ll_new = _bernoulli_loglik(y, cdf(X @ cand), w)
            if ll_new >= ll - 1e-12 * abs(ll):
                beta, ll = cand, ll_new
                break
            t *= 0.5
        else:
            break  # no ascent direction left; let the FOC check decide

    z = X @ beta
    p = cdf(z)
    f = pdf(z)
    pc = np.clip(p, 1e-12, 1.0 - 1e-12)
    scores = X * (w * f / (pc * (1.0 - pc)) * (y - p))[:, None]
    if not converged and np.max(np.abs(scores.mean(axis=0))) <= tol * scale:
        converged = True
    if not converged:
        raise ConvergenceError(
            f"binary response fit did not converge in {max_iter} iterations "
            "(possible perfect separation)",
            last_iterate=beta,
            iterations=it,
        )
    information = scores.T @ scores / n
    return BinaryFit(
        link=link,
        coefficients=beta,
        fitted_probs=np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP),
        scores=scores,
        information=information,
        converged=converged,
        iterations=it,
        design_columns=tuple(design_columns),
    )


def _resolve_columns(names, spec):
    if spec is None:
        return list(range(len(names))), tuple(names)
    idx = []
    for c in spec:
        if isinstance(c, str):
            if c not in names:
                raise SchemaError(f"unknown design column '{c}' (have {list(names)})")
            idx.append(names.index(c))
        else:
            if not 0 <= int(c) < len(names):
                raise SchemaError(f"design column index {c} out of range")
            idx.append(int(c))
    return idx, tuple(names[j] for j in idx)


def fit_propensity(ds: Dataset, spec=None, link: str = "logit") -> BinaryFit:
    """Binary-response fit of the treatment indicator on covariate columns."""
    if ds.n_levels > 2:
        raise SchemaError("use fit_multinomial_propensity for multivalued treatments")
    idx, names = _resolve_columns(list(ds.covariate_names), spec)
    return fit_binary_response(
        ds.covariates[:, idx], ds.treatment.astype(float), link, design_columns=names
    )


def fit_missingness(ds: Dataset, spec=None, link: str = "logit") -> BinaryFit:
    """Binary-response fit of S on columns of the augmented design Z=(X, W)."""
    z = ds.augmented_design()
    idx, names = _resolve_columns(list(ds.augmented_names()), spec)
    return fit_binary_response(
        z[:, idx], ds.observed.astype(float), link, design_columns=names
    )


@dataclass(frozen=True)
class MultinomialFit:
    """Multinomial-logit propensity fit; level 0 is the baseline."""

    coefficients: np.ndarray  # K x (L-1)
    probs: np.ndarray  # N x L, rows sum to one
    converged: bool
    iterations: int


def fit_multinomial_propensity(
    ds: Dataset, spec=None, tol: float = SCORE_TOL, max_iter: int = MAX_ITER
) -> MultinomialFit:
    """Multinomial-logit fit of the treatment level on covariates.

    Reduces to the binary logit when the treatment takes two levels.
    """
    levels = ds.n_levels
    idx, _ = _resolve_columns(list(ds.covariate_names), spec)
    X = ds.covariates[:, idx]
    n, k = X.shape
    counts = np.bincount(ds.treatment, minlength=levels)
    if np.any(counts == 0):
        raise SeparationError(f"treatment level(s) {np.flatnonzero(counts == 0).tolist()} unobserved")
    if levels < 2:
        raise SeparationError("treatment takes a single level")
    _check_full_rank(X)

    Y = (ds.treatment[:, None] == np.arange(1, levels)[None, :]).astype(float)
    B = np.zeros((k, levels - 1))

    def _probs(Bm):
        eta = X @ Bm
        eta = np.column_stack([np.zeros(n), eta])
        eta -= eta.max(axis=1, keepdims=True)
        e = np.exp(eta)
        return e / e.sum(axis=1, keepdims=True)

    def _loglik(P):
        return float(np.log(np.clip(P[np.arange(n), ds.treatment], 1e-300, None)).sum())

    ll = _loglik(_probs(B))
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        P = _probs(B)
        Pg = P[:, 1:]
        grad = (X.T @ (Y - Pg)).T.ravel() / n  # blocks ordered by level
        if np.max(np.abs(grad)) <= tol:
            converged = True
            break
        m = levels - 1
        H = np.zeros((m * k, m * k))
        for g in range(m):
            for h in range(m):
                wgh = Pg[:, g] * ((1.0 if g == h else 0.0) - Pg[:, h])
                H[g * k : (g + 1) * k, h * k : (h + 1) * k] = (X * wgh[:, None]).T @ X / n
        try:
            step = np.linalg.solve(H, grad).reshape(m, k).T
        except np.linalg.LinAlgError as exc:
            raise RankError(f"singular multinomial Hessian: {exc}") from exc
        t = 1.0
        while t > 1e-12:
            cand = B + t * step
            ll_new = _loglik(_probs(cand))
            if ll_new >= ll - 1e-12 * abs(ll):
                B, ll = cand, ll_new
                break
            t *= 0.5
        else:
            break
    if not converged:
        P = _probs(B)
        if np.max(np.abs(((X.T @ (Y - P[:, 1:])).T.ravel() / n))) <= tol:
            converged = True
        else:
            raise ConvergenceError(
                f"multinomial fit did not converge in {max_iter} iterations",
                last_iterate=B,
                iterations=it,
            )
    P = np.clip(_probs(B), PROB_CLIP, 1.0 - PROB_CLIP)
    P /= P.sum(axis=1, keepdims=True)
    return MultinomialFit(coefficients=B, probs=P, converged=converged, iterations=it)
