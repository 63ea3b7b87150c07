"""Causal estimands built on the fitted second steps.

ATE predictions average over every row of the estimation sample (the
estimand is population-level, so rows with missing outcomes count);
quantile effects come in three flavors: conditional (CQTE), a linear
projection to it, and unconditional (direct weighted quantiles or the
recentered-influence-function regression route).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ConfigError, DensityInstabilityError, EstimationInfeasibleError, SchemaError
from .solvers import MEstimateFit, _family_mean, glm_newton_raw, weighted_quantile
from .weights import WeightSet


@dataclass(frozen=True)
class EffectEstimate:
    """Scalar or per-grid treatment effect with provenance tags."""

    estimand: str
    point: object  # float or ndarray over a grid
    se: float = None
    variant: str = ""
    tau: float = None
    grid: np.ndarray = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        point = self.point.tolist() if isinstance(self.point, np.ndarray) else self.point
        out = {"estimand": self.estimand, "point": point, "variant": self.variant}
        if self.se is not None:
            out["se"] = self.se
        if self.tau is not None:
            out["tau"] = self.tau
        if self.grid is not None:
            out["grid"] = np.asarray(self.grid).tolist()
        out.update({k: v for k, v in self.metadata.items() if not isinstance(v, np.ndarray)})
        return out


@dataclass(frozen=True)
class RifConfig:
    """Kernel settings for the RIF-regression quantile route."""

    tau: float
    bandwidth: float = None  # None -> weighted Silverman rule
    kernel: str = "gaussian"

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ConfigError(f"tau must be inside (0,1), got {self.tau}")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ConfigError("bandwidth must be positive")
        if self.kernel != "gaussian":
            raise ConfigError("only the gaussian kernel is implemented")


def _rows(ds: Dataset, keep=None) -> np.ndarray:
    if keep is None:
        return np.arange(ds.n_rows)
    keep = np.asarray(keep)
    if keep.dtype == bool:
        return np.flatnonzero(keep)
    return keep


def ate_separate(
    fit_treated: MEstimateFit, fit_control: MEstimateFit, ds: Dataset, keep=None, variant: str = ""
) -> EffectEstimate:
    """Difference of mean predicted outcomes over the estimation sample."""
    if fit_treated.objective != fit_control.objective:
        raise ConfigError(
            "arm fits use different objectives: "
            f"{fit_treated.objective.label()} vs {fit_control.objective.label()}"
        )
    rows = _rows(ds, keep)
    X = ds.covariates[rows]
    point = float(fit_treated.predict_mean(X).mean() - fit_control.predict_mean(X).mean())
    return EffectEstimate(
        estimand="ate_separate",
        point=point,
        variant=variant,
        metadata={"n_rows_averaged": int(len(rows))},
    )


def ate_pooled(ds: Dataset, ws: WeightSet, family: str = "gaussian_identity") -> EffectEstimate:
    """Single weighted GLM with a treatment dummy, pooled weight w1 + w0.

    Delta = mean h(x theta + eta) - mean h(x theta) over the estimation
    sample; with the identity link this collapses to eta itself.
    """
    if ds.n_levels > 2:
        raise ConfigError("ate_pooled is defined for binary treatments")
    w = ws.effective(0) + ws.effective(1)
    keep = w > 0
    if not keep.any():
        raise EstimationInfeasibleError("pooled fit has no rows with positive weight")
    Xp = np.column_stack([ds.covariates, ds.treatment.astype(float)])
    y = ds.outcome_filled(0.0)
    theta, _ = glm_newton_raw(Xp[keep], y[keep], w[keep], family, n_rows=ds.n_rows)
    h, _ = _family_mean(family)
    rows = np.flatnonzero(ws.trim_mask)
    X = ds.covariates[rows]
    eta = theta[-1]
    base = X @ theta[:-1]
    point = float(h(base + eta).mean() - h(base).mean())
    return EffectEstimate(
        estimand="ate_pooled",
        point=point,
        variant=ws.variant,
        metadata={"eta": float(eta), "family": family},
    )


def _check_support(ds: Dataset, grid: np.ndarray) -> int:
    """Count grid rows whose non-intercept coordinates leave the sample range."""
    lo = ds.covariates.min(axis=0)
    hi = ds.covariates.max(axis=0)
    outside = (grid < lo[None, :]) | (grid > hi[None, :])
    return int(np.any(outside[:, 1:], axis=1).sum())


def cqte(
    fit_treated: MEstimateFit,
    fit_control: MEstimateFit,
    grid,
    response_transform: str = "identity",
    variant: str = "",
    ds: Dataset = None,
) -> EffectEstimate:
    """Pointwise difference of predicted conditional quantiles on a grid.

    Under the exponential conditional-quantile model the per-arm fits
    are linear quantile regressions on the log outcome; equivariance
    makes exp of the fitted index the conditional quantile, so pass
    response_transform="exp".
    """
    if fit_treated.objective.kind != "quantile" or fit_control.objective.kind != "quantile":
        raise ConfigError("cqte requires quantile fits")
    if fit_treated.objective.tau != fit_control.objective.tau:
        raise ConfigError("arm fits are at different quantile levels")
    if response_transform not in ("identity", "exp"):
        raise ConfigError(f"unknown response transform '{response_transform}'")
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    q1 = fit_treated.predict_index(grid)
    q0 = fit_control.predict_index(grid)
    if response_transform == "exp":
        q1, q0 = np.exp(q1), np.exp(q0)
    extrapolated = 0
    if ds is not None:
        extrapolated = _check_support(ds, grid)
        if extrapolated:
            warnings.warn(
                f"{extrapolated} grid point(s) outside the covariate support; "
                "conditional quantile differences there are extrapolations",
                RuntimeWarning,
                stacklevel=2,
            )
    return EffectEstimate(
        estimand="cqte",
        point=q1 - q0,
        variant=variant,
        tau=fit_treated.objective.tau,
        grid=grid,
        metadata={"transform": response_transform, "extrapolated_points": extrapolated},
    )


def lp_cqte(
    qr_treated: MEstimateFit, qr_control: MEstimateFit, grid, variant: str = ""
) -> EffectEstimate:
    """Linear-projection difference X (theta1(tau) - theta0(tau)) on a grid."""
    if qr_treated.objective.kind != "quantile" or qr_control.objective.kind != "quantile":
        raise ConfigError("lp_cqte requires quantile fits")
    if qr_treated.objective.tau != qr_control.objective.tau:
        raise ConfigError("arm fits are at different quantile levels")
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    point = grid @ (qr_treated.theta - qr_control.theta)
    return EffectEstimate(
        estimand="lp_cqte",
        point=point,
        variant=variant,
        tau=qr_treated.objective.tau,
        grid=grid,
        metadata={"coef_diff": (qr_treated.theta - qr_control.theta).tolist()},
    )


def _arm_values(ds: Dataset, ws: WeightSet, arm: int):
    w = ws.effective(arm)
    keep = w > 0
    if not keep.any():
        raise EstimationInfeasibleError(f"arm {arm} has no rows with positive weight")
    return ds.outcome_filled(0.0)[keep], w[keep]


def uqte_direct(ds: Dataset, ws: WeightSet, tau: float, variant: str = None) -> EffectEstimate:
    """Difference of weighted marginal quantiles (intercept-only QR)."""
    if not 0.0 < tau < 1.0:
        raise ConfigError(f"tau must be inside (0,1), got {tau}")
    y1, w1 = _arm_values(ds, ws, 1)
    y0, w0 = _arm_values(ds, ws, 0)
    q1 = weighted_quantile(y1, w1, tau)
    q0 = weighted_quantile(y0, w0, tau)
    degenerate = q1 == 0.0 and q0 == 0.0
    return EffectEstimate(
        estimand="uqte_direct",
        point=q1 - q0,
        variant=variant if variant is not None else ws.variant,
        tau=tau,
        metadata={"q_treated": q1, "q_control": q0, "degenerate_quantile": degenerate},
    )


def weighted_sd(values, weights) -> float:
    mean = np.average(values, weights=weights)
    return float(np.sqrt(np.average((values - mean) ** 2, weights=weights)))


def silverman_bandwidth(values, weights) -> float:
    """0.9 min(SD_w, IQR_w/1.34) (sum of weights)^(-1/5) on the weighted sample."""
    sd = weighted_sd(values, weights)
    iqr = weighted_quantile(values, weights, 0.75) - weighted_quantile(values, weights, 0.25)
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    if spread <= 0:
        raise DensityInstabilityError("weighted sample has no spread; cannot pick a bandwidth")
    return float(0.9 * spread * weights.sum() ** (-0.2))


def weighted_kde_at(values, weights, point: float, bandwidth: float) -> float:
    """Self-normalized weighted gaussian kernel density at one point."""
    z = (point - values) / bandwidth
    dens = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
    return float(np.dot(weights, dens) / (weights.sum() * bandwidth))


def uqte_rif(ds: Dataset, ws: WeightSet, tau: float, cfg: RifConfig = None) -> EffectEstimate:
    """RIF-regression route to the unconditional quantile effect.

    Per arm: weighted quantile, weighted kernel density at it, RIF
    construction, weighted least-squares RIF regression on X; the
    arm summary is the weighted mean of the fitted RIFs.
    """
    cfg = cfg if cfg is not None else RifConfig(tau=tau)
    if cfg.tau != tau:
        raise ConfigError("RifConfig.tau disagrees with the requested tau")
    summaries = []
    meta = {}
    for arm in (1, 0):
        w = ws.effective(arm)
        keep = w > 0
        if not keep.any():
            raise EstimationInfeasibleError(f"arm {arm} has no rows with positive weight")
        y = ds.outcome_filled(0.0)
        yk, wk = y[keep], w[keep]
        q = weighted_quantile(yk, wk, tau)
        h = cfg.bandwidth if cfg.bandwidth is not None else silverman_bandwidth(yk, wk)
        dens = weighted_kde_at(yk, wk, q, h)
        if dens < 1e-10:
            raise DensityInstabilityError(
                f"arm {arm}: kernel density {dens:.3g} at the tau={tau:g} quantile "
                "is too small to divide by"
            )
        rif = q + (tau - (yk <= q).astype(float)) / dens
        Xk = ds.covariates[keep]
        gram = (Xk * wk[:, None]).T @ Xk
        theta = np.linalg.solve(gram, (Xk * wk[:, None]).T @ rif)
        fitted_mean = float(np.dot(wk, Xk @ theta) / wk.sum())
        summaries.append(fitted_mean)
        meta[f"q_arm{arm}"] = q
        meta[f"bandwidth_arm{arm}"] = h
        meta[f"density_arm{arm}"] = dens
    return EffectEstimate(
        estimand="uqte_rif",
        point=summaries[0] - summaries[1],
        variant=ws.variant,
        tau=tau,
        metadata=meta,
    )


def arm_contrast_multivalued(
    fits: dict, ds: Dataset, arm_a: int, arm_b: int, keep=None, variant: str = ""
) -> EffectEstimate:
    """Mean contrast E[Y(a)] - E[Y(b)] from per-level weighted fits."""
    for g in (arm_a, arm_b):
        if g not in fits:
            raise ConfigError(f"no fit supplied for treatment level {g}")
        if g >= ds.n_levels:
            raise SchemaError(f"level {g} out of range for {ds.n_levels} levels")
    rows = _rows(ds, keep)
    X = ds.covariates[rows]
    point = float(fits[arm_a].predict_mean(X).mean() - fits[arm_b].predict_mean(X).mean())
    return EffectEstimate(
        estimand=f"contrast[{arm_a}-{arm_b}]",
        point=point,
        variant=variant,
        metadata={"levels": [arm_a, arm_b]},
    )
