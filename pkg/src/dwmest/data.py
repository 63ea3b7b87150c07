"""Sample container and tabular ingest/export.

The observed sample holds the outcome (defined only where the
observability indicator is 1), the treatment indicator, the
observability indicator, and a covariate matrix whose first column is
the constant one. Missing outcomes are kept behind an explicit
presence mask: reading an unobserved entry raises, and the raw storage
uses NaN so that accidental arithmetic poisons results instead of
silently using a sentinel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.linalg

from .errors import (
    ConsistencyError,
    EstimationInfeasibleError,
    MissingOutcomeError,
    RankError,
    SchemaError,
)

CONTROL = 0
TREATED = 1

_RANK_TOL = 1e-10


def _check_full_rank(X, names=None):
    """QR with column pivoting; raises RankError naming dependent columns."""
    _, r, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        raise RankError("covariate matrix is identically zero", columns=list(piv))
    rank = int(np.sum(diag > _RANK_TOL * diag[0]))
    if rank < X.shape[1]:
        dep = sorted(piv[rank:].tolist())
        labels = [names[j] if names else f"column {j}" for j in dep]
        raise RankError(
            "covariate matrix is rank deficient; dependent columns: "
            + ", ".join(str(c) for c in labels),
            columns=dep,
        )


@dataclass(frozen=True)
class Dataset:
    """Immutable observed sample (outcome, treatment, observability, design).

    Construct through :meth:`from_arrays` (or ``load_csv``) so the
    invariants are enforced: treatment and observability fully
    populated and binary (or level-coded), outcome present exactly on
    observed rows, intercept present, full column rank.
    """

    outcome_values: np.ndarray  # NaN where observed == 0
    treatment: np.ndarray
    observed: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple = field(default=())

    @classmethod
    def from_arrays(cls, outcome, treatment, observed, covariates, covariate_names=None):
        outcome = np.asarray(outcome, dtype=float).copy()
        treatment = np.asarray(treatment)
        observed = np.asarray(observed)
        covariates = np.asarray(covariates, dtype=float)
        if covariates.ndim != 2:
            raise SchemaError("covariates must be a 2-D matrix")
        n = covariates.shape[0]
        for nm, arr in (("outcome", outcome), ("treatment", treatment), ("observed", observed)):
            if arr.shape != (n,):
                raise SchemaError(f"{nm} has length {arr.shape}, expected ({n},)")

        if np.any(pd.isna(treatment)) or np.any(pd.isna(observed)):
            raise SchemaError("treatment and observed must be populated for every row")
        tr = np.asarray(treatment, dtype=float)
        ob = np.asarray(observed, dtype=float)
        if not np.all(tr == np.round(tr)) or np.any(tr < 0):
            bad = int(np.flatnonzero((tr != np.round(tr)) | (tr < 0))[0])
            raise SchemaError(f"treatment is not a nonnegative integer code at row {bad}")
        if not np.all(np.isin(ob, (0.0, 1.0))):
            bad = int(np.flatnonzero(~np.isin(ob, (0.0, 1.0)))[0])
            raise SchemaError(f"observed is not binary at row {bad}")
        tr = tr.astype(np.int64)
        ob = ob.astype(np.int64)

        missing = np.isnan(outcome)
        bad = np.flatnonzero((ob == 1) & missing)
        if bad.size:
            raise ConsistencyError(
                f"rows marked observed but outcome missing: {bad[:10].tolist()}"
            )
        outcome[ob == 0] = np.nan  # never retain values behind the mask

        if not np.all(np.isfinite(covariates)):
            bad = np.flatnonzero(~np.all(np.isfinite(covariates), axis=1))
            raise SchemaError(
                f"rows with missing or non-finite covariates rejected: {bad[:10].tolist()}"
            )
        names = list(covariate_names) if covariate_names else [f"x{j}" for j in range(covariates.shape[1])]
        if not np.all(covariates[:, 0] == 1.0):
            covariates = np.column_stack([np.ones(n), covariates])
            names = ["const"] + names
        _check_full_rank(covariates, names)

        for arr in (outcome, tr, ob, covariates):
            arr.setflags(write=False)
        return cls(outcome, tr, ob, covariates, tuple(names))

    @property
    def n_rows(self) -> int:
        return self.covariates.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    @property
    def n_levels(self) -> int:
        return int(self.treatment.max()) + 1

    @property
    def outcome(self) -> np.ma.MaskedArray:
        """Outcome behind its presence mask (masked where unobserved)."""
        return np.ma.MaskedArray(self.outcome_values, mask=self.observed == 0)

    def outcome_value(self, i: int) -> float:
        if self.observed[i] == 0:
            raise MissingOutcomeError(f"outcome is unobserved at row {i}")
        return float(self.outcome_values[i])

    def outcome_filled(self, fill: float = 0.0) -> np.ndarray:
        """Full-length outcome with `fill` where unobserved.

        Safe only when multiplied by weights that vanish on S=0 rows.
        """
        return np.where(self.observed == 1, self.outcome_values, fill)

    def augmented_design(self) -> np.ndarray:
        """Z = (X, W): covariates concatenated with the treatment column(s).

        Multivalued treatments append one-hot columns for levels 1..T.
        """
        if self.n_levels <= 2:
            return np.column_stack([self.covariates, self.treatment.astype(float)])
        onehot = (self.treatment[:, None] == np.arange(1, self.n_levels)[None, :]).astype(float)
        return np.column_stack([self.covariates, onehot])

    def augmented_names(self) -> tuple:
        if self.n_levels <= 2:
            return self.covariate_names + ("treatment",)
        return self.covariate_names + tuple(f"treatment_{g}" for g in range(1, self.n_levels))


def split_by_arm(ds: Dataset, arm: int) -> np.ndarray:
    """Row indices contributing to arm `arm`'s objective: S=1 and W=arm."""
    if arm < 0 or arm >= ds.n_levels:
        raise SchemaError(f"arm {arm} out of range for {ds.n_levels} treatment levels")
    idx = np.flatnonzero((ds.observed == 1) & (ds.treatment == arm))
    if idx.size == 0:
        raise EstimationInfeasibleError(
            f"no observed rows in arm {arm}; overlap fails at the sample level"
        )
    return idx


def load_csv(path, column_map, missing_token: str = "NA") -> Dataset:
    """Read a Dataset from a headed CSV.

    column_map keys: "outcome", "treatment", "covariates" (list of
    names) and optionally "observed". Without an observed column, rows
    whose outcome cell equals `missing_token` get observed=0. With one,
    consistency between the two is enforced.
    """
    try:
        frame = pd.read_csv(
            path,
            na_values=[missing_token],
            keep_default_na=False,
            skipinitialspace=True,
            float_precision="round_trip",
        )
    except (OSError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise SchemaError(f"cannot parse CSV {path}: {exc}") from exc

    needed = [column_map["outcome"], column_map["treatment"], *column_map["covariates"]]
    if "observed" in column_map and column_map["observed"]:
        needed.append(column_map["observed"])
    absent = [c for c in needed if c not in frame.columns]
    if absent:
        raise SchemaError(f"columns missing from {path}: {absent}")

    def _numeric(col):
        out = pd.to_numeric(frame[col], errors="coerce")
        fresh = out.isna() & ~frame[col].isna()
        if fresh.any():
            raise SchemaError(
                f"non-numeric value in column '{col}' at row {int(np.flatnonzero(fresh)[0])}"
            )
        return out.to_numpy(dtype=float)

    outcome = _numeric(column_map["outcome"])
    treatment = _numeric(column_map["treatment"])
    if np.any(pd.isna(treatment)):
        bad = int(np.flatnonzero(pd.isna(treatment))[0])
        raise SchemaError(f"treatment missing at row {bad}")
    if "observed" in column_map and column_map["observed"]:
        observed = _numeric(column_map["observed"])
        if np.any(pd.isna(observed)):
            bad = int(np.flatnonzero(pd.isna(observed))[0])
            raise SchemaError(f"observed missing at row {bad}")
    else:
        observed = (~np.isnan(outcome)).astype(float)

    cov = np.column_stack([_numeric(c) for c in column_map["covariates"]])
    return Dataset.from_arrays(
        outcome, treatment, observed, cov, covariate_names=list(column_map["covariates"])
    )


def save_csv(ds: Dataset, path, missing_token: str = "NA") -> None:
    """Write a Dataset (17 significant digits; intercept column dropped)."""
    cols = {}
    out = np.array([f"{v:.17g}" for v in ds.outcome_filled(np.nan)], dtype=object)
    out[ds.observed == 0] = missing_token
    cols["outcome"] = out
    cols["treatment"] = ds.treatment
    cols["observed"] = ds.observed
    for j in range(1, ds.n_covariates):  # skip intercept
        cols[ds.covariate_names[j]] = [f"{v:.17g}" for v in ds.covariates[:, j]]
    pd.DataFrame(cols).to_csv(path, index=False)


def csv_column_map(ds: Dataset) -> dict:
    """column_map that re-reads a file produced by save_csv."""
    return {
        "outcome": "outcome",
        "treatment": "treatment",
        "observed": "observed",
        "covariates": [ds.covariate_names[j] for j in range(1, ds.n_covariates)],
    }


def summary_stats(ds: Dataset) -> dict:
    """Means/SDs by arm-and-observability group, JSON-serializable."""

    def _group(mask):
        rows = np.flatnonzero(mask)
        rec = {"n": int(rows.size)}
        if rows.size:
            rec["covariate_mean"] = ds.covariates[rows].mean(axis=0).tolist()
            rec["covariate_sd"] = ds.covariates[rows].std(axis=0).tolist()
            obs = rows[ds.observed[rows] == 1]
            if obs.size:
                rec["outcome_mean"] = float(ds.outcome_values[obs].mean())
                rec["outcome_sd"] = float(ds.outcome_values[obs].std())
        return rec

    groups = {}
    for g in range(ds.n_levels):
        groups[f"arm{g}_observed"] = _group((ds.treatment == g) & (ds.observed == 1))
        groups[f"arm{g}_missing"] = _group((ds.treatment == g) & (ds.observed == 0))
    return {
        "n_rows": ds.n_rows,
        "covariate_names": list(ds.covariate_names),
        "share_observed": float(ds.observed.mean()),
        "share_treated": float((ds.treatment > 0).mean()),
        "groups": groups,
    }


def summary_json(ds: Dataset) -> str:
    return json.dumps(summary_stats(ds), indent=2, sort_keys=True)
