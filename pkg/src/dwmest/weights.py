"""Composite inverse-probability weights and support trimming.

The d-weighted scheme divides each observed row's arm indicator by the
product of its missingness probability and its arm-assignment
probability; ps-weighting drops the missingness factor; the unweighted
scheme keeps the raw indicators. Trimming operates on the composite
probability scale and defines the estimation sample for every
downstream solver.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .binary import BinaryFit, MultinomialFit
from .data import Dataset
from .errors import ConfigError, EstimationInfeasibleError, SchemaError

VARIANTS = ("unweighted", "ps_weighted", "d_weighted")


@dataclass(frozen=True)
class WeightSet:
    """Per-arm weights, composite probabilities, and the trim mask.

    weights[g, i] is zero off-arm and on unobserved rows. trim_mask is
    True on kept rows. composite_probs[g, i] = R-hat_i * P-hat(arm g)_i
    regardless of variant, so trimming is variant-independent.
    """

    weights: np.ndarray  # (L, N)
    composite_probs: np.ndarray  # (L, N)
    own_composite: np.ndarray  # (N,) composite probability of the row's own arm
    trim_mask: np.ndarray  # (N,) bool
    variant: str
    clip_count: int = 0
    ps_fit: object = None
    miss_fit: object = None
    trim_bounds: tuple = (0.0, 1.0)

    @property
    def n_levels(self) -> int:
        return self.weights.shape[0]

    @property
    def n_rows(self) -> int:
        return self.weights.shape[1]

    @property
    def w_treated(self) -> np.ndarray:
        return self.weights[1]

    @property
    def w_control(self) -> np.ndarray:
        return self.weights[0]

    def effective(self, arm: int) -> np.ndarray:
        """Weights with trimmed rows zeroed; what every solver consumes."""
        return self.weights[arm] * self.trim_mask

    @property
    def n_effective(self) -> int:
        return int(self.trim_mask.sum())

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "n_rows": self.n_rows,
            "n_effective": self.n_effective,
            "n_trimmed": int(self.n_rows - self.trim_mask.sum()),
            "trim_bounds": list(self.trim_bounds),
            "clip_count": self.clip_count,
            "mean_weight_by_arm": [float(self.effective(g).mean()) for g in range(self.n_levels)],
        }


def _arm_probabilities(ps_fit, ds: Dataset) -> np.ndarray:
    """(L, N) matrix of fitted assignment probabilities per level."""
    if isinstance(ps_fit, MultinomialFit):
        return ps_fit.probs.T
    if isinstance(ps_fit, BinaryFit):
        if ds.n_levels > 2:
            raise ConfigError("binary propensity fit with a multivalued treatment")
        g1 = ps_fit.fitted_probs
        return np.vstack([1.0 - g1, g1])
    raise ConfigError(f"unsupported propensity fit type {type(ps_fit).__name__}")


def compute_weights(ps_fit, miss_fit: BinaryFit, ds: Dataset, variant: str = "d_weighted") -> WeightSet:
    """Build the per-arm weight vectors for one estimator variant.

    d_weighted divides by R-hat * arm probability, ps_weighted by the
    arm probability alone, unweighted keeps the indicators. Rows whose
    fitted probabilities sit at the clip floor are counted and surfaced
    (potential overlap failure), never silently repaired.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant '{variant}' (expected one of {VARIANTS})")
    n = ds.n_rows
    if miss_fit.fitted_probs.shape != (n,):
        raise SchemaError("missingness fit is not aligned with the dataset rows")
    arm_probs = _arm_probabilities(ps_fit, ds)
    if arm_probs.shape[1] != n:
        raise SchemaError("propensity fit is not aligned with the dataset rows")
    r_hat = miss_fit.fitted_probs
    composite = arm_probs * r_hat[None, :]

    levels = np.arange(ds.n_levels)
    indicator = (ds.treatment[None, :] == levels[:, None]) & (ds.observed[None, :] == 1)
    indicator = indicator.astype(float)
    if variant == "unweighted":
        weights = indicator
    elif variant == "ps_weighted":
        weights = indicator / arm_probs
    else:
        weights = indicator / composite

    clip_count = miss_fit.n_clipped
    clip_count += ps_fit.n_clipped if isinstance(ps_fit, BinaryFit) else 0
    return WeightSet(
        weights=weights,
        composite_probs=composite,
        own_composite=composite[ds.treatment, np.arange(n)],
        trim_mask=np.ones(n, dtype=bool),
        variant=variant,
        clip_count=clip_count,
        ps_fit=ps_fit,
        miss_fit=miss_fit,
    )


def weights_from_probabilities(
    ds: Dataset, treated_prob, miss_prob, variant: str = "d_weighted"
) -> WeightSet:
    """WeightSet built from externally supplied probabilities.

    Used when the true assignment and missingness probabilities are
    known (efficiency diagnostics compare estimated against known
    weights on identical draws). Binary treatments only.
    """
    if ds.n_levels > 2:
        raise ConfigError("weights_from_probabilities supports binary treatments")
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant '{variant}' (expected one of {VARIANTS})")
    g1 = np.asarray(treated_prob, dtype=float)
    r = np.asarray(miss_prob, dtype=float)
    n = ds.n_rows
    if g1.shape != (n,) or r.shape != (n,):
        raise SchemaError("probability vectors are not aligned with the dataset rows")
    if np.any((g1 <= 0) | (g1 >= 1)) or np.any((r <= 0) | (r > 1)):
        raise SchemaError("probabilities must lie strictly inside the unit interval")
    arm_probs = np.vstack([1.0 - g1, g1])
    composite = arm_probs * r[None, :]
    indicator = (ds.treatment[None, :] == np.arange(2)[:, None]) & (ds.observed[None, :] == 1)
    indicator = indicator.astype(float)
    if variant == "unweighted":
        weights = indicator
    elif variant == "ps_weighted":
        weights = indicator / arm_probs
    else:
        weights = indicator / composite
    return WeightSet(
        weights=weights,
        composite_probs=composite,
        own_composite=composite[ds.treatment, np.arange(n)],
        trim_mask=np.ones(n, dtype=bool),
        variant=variant,
    )


def trim(ws: WeightSet, lo: float, hi: float) -> WeightSet:
    """Drop rows whose own-arm composite probability leaves [lo, hi].

    Each row is judged on the composite probability of the arm it
    belongs to (R-hat*G-hat for treated rows, R-hat*(1-G-hat) for
    control rows), regardless of S: trimming defines the estimation
    sample over which effect predictions are averaged.
    """
    if not (0.0 <= lo < hi <= 1.0):
        raise ConfigError(f"trim bounds must satisfy 0 <= lo < hi <= 1, got ({lo}, {hi})")
    keep = ws.trim_mask & (ws.own_composite >= lo) & (ws.own_composite <= hi)
    if not keep.any():
        raise EstimationInfeasibleError(
            f"trimming at ({lo}, {hi}) drops every row (min composite "
            f"{ws.own_composite.min():.3g}, max {ws.own_composite.max():.3g})"
        )
    return replace(ws, trim_mask=keep, trim_bounds=(lo, hi))
