"""Synthetic populations and the Monte Carlo scenario grid.

Two designs: a binary-outcome design for average-effect experiments and
a lognormal design for quantile-effect experiments. A million-row
population is generated once per (design, seed); replicates draw
without replacement from it, so every stored truth is a property of
that exact finite population. Estimation cells (which link, which
columns, which second step) are plain data and round-trip through JSON.

RNG streams are Philox counter-based with explicit spawn keys:
(0,) for the population, (1, rep) for replicate sampling; the bootstrap
uses (1000, b). Results are bit-identical for a fixed config regardless
of worker count.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy.special import ndtr, ndtri

from .binary import fit_missingness, fit_propensity
from .data import Dataset
from .effects import ate_separate, uqte_direct, uqte_rif
from .errors import ConfigError, DwmestError, ReliabilityError
from .inference import ate_variance, sandwich_theta
from .solvers import solve_weighted_binary_qmle, solve_weighted_ls, solve_weighted_qr
from .weights import VARIANTS, compute_weights, weights_from_probabilities

DESIGNS = ("ate_binary", "qte_lognormal")

# Data-generating constants. Both designs share the covariate law,
# the assignment index, and the missingness index; they differ in the
# outcome equation. The treated/control outcome indices of the binary
# design are assigned so that the population mean effect is +0.0968.
COVARIATE_MEAN = np.array([1.0, 2.0])
COVARIATE_COV = np.array([[3.0, 0.2], [0.2, 2.0]])
ERROR_COV = np.array([[1.0, 0.2], [0.2, 1.0]])
ASSIGN_COEF = np.array([0.05, -0.2, -0.11])  # on (1, x1, x2)
MISS_COEF = np.array([0.01, 0.03, 0.05, -0.28])  # on (1, w, x1, x2)
BINARY_INDEX_TREATED = np.array([0.0, 1.0, 1.0])
BINARY_INDEX_CONTROL = np.array([-1.0, 1.0, 1.0])
LOGNORMAL_INDEX_TREATED = np.array([0.1, -0.36, -0.1])
LOGNORMAL_INDEX_CONTROL = np.array([0.2, 0.24, -0.45])


def _stream(seed: int, *key) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


@dataclass
class Population:
    """Finite synthetic population with both potential outcomes kept."""

    design: str
    seed: int
    size: int
    covariates: np.ndarray  # (N, 3) with intercept
    treatment: np.ndarray
    observed: np.ndarray
    y_treated: np.ndarray
    y_control: np.ndarray
    true_treat_prob: np.ndarray
    true_miss_prob: np.ndarray
    truths: dict = field(default_factory=dict)
    _qr_truth_cache: dict = field(default_factory=dict, repr=False)

    @property
    def outcome(self) -> np.ndarray:
        return np.where(self.treatment == 1, self.y_treated, self.y_control)

    def lp_quantile_truth(self, tau: float, arm: int) -> np.ndarray:
        """Population linear-projection quantile coefficients for one arm."""
        key = (round(float(tau), 12), arm)
        if key not in self._qr_truth_cache:
            y = self.y_treated if arm == 1 else self.y_control
            self._qr_truth_cache[key] = population_quantile_regression(
                self.covariates, y, tau
            )
        return self._qr_truth_cache[key]


def _linear_projection_r2(X, y) -> float:
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    fitted = X @ beta
    return float(fitted.var() / y.var())


def generate_population(design: str, seed: int, size: int = 1_000_000) -> Population:
    """Draw one finite population and compute its stored truths."""
    if design not in DESIGNS:
        raise ConfigError(f"unknown design '{design}' (expected one of {DESIGNS})")
    rng = _stream(seed, 0)
    x12 = rng.multivariate_normal(COVARIATE_MEAN, COVARIATE_COV, size=size)
    X = np.column_stack([np.ones(size), x12])
    errors = rng.multivariate_normal(np.zeros(2), ERROR_COV, size=size)
    treat_prob = 1.0 / (1.0 + np.exp(-(X @ ASSIGN_COEF)))
    W = (treat_prob > rng.uniform(size=size)).astype(np.int64)
    miss_index = np.column_stack([np.ones(size), W.astype(float), x12]) @ MISS_COEF
    miss_prob = 1.0 / (1.0 + np.exp(-miss_index))
    S = (miss_prob > rng.uniform(size=size)).astype(np.int64)

    if design == "ate_binary":
        y1 = (X @ BINARY_INDEX_TREATED + errors[:, 1] > 0).astype(float)
        y0 = (X @ BINARY_INDEX_CONTROL + errors[:, 0] > 0).astype(float)
    else:
        y1 = np.exp(X @ LOGNORMAL_INDEX_TREATED + errors[:, 1])
        y0 = np.exp(X @ LOGNORMAL_INDEX_CONTROL + errors[:, 0])

    truths = {
        "p_treated": float(W.mean()),
        "p_observed": float(S.mean()),
        "ate": float((y1 - y0).mean()),
        "r2_treated": _linear_projection_r2(X, y1),
        "r2_control": _linear_projection_r2(X, y0),
    }
    return Population(
        design=design,
        seed=seed,
        size=size,
        covariates=X,
        treatment=W,
        observed=S,
        y_treated=y1,
        y_control=y0,
        true_treat_prob=treat_prob,
        true_miss_prob=miss_prob,
        truths=truths,
    )


_POPULATION_CACHE: dict = {}


def get_population(design: str, seed: int, size: int = 1_000_000) -> Population:
    key = (design, seed, size)
    if key not in _POPULATION_CACHE:
        _POPULATION_CACHE[key] = generate_population(design, seed, size)
    return _POPULATION_CACHE[key]


_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def population_quantile_regression(X, y, tau: float, tol: float = 1e-10) -> np.ndarray:
    """Quantile-regression coefficients at population scale.

    Damped Newton on a Gaussian-convolution smoothing of the check
    loss with bandwidth continuation; the final bandwidth is small
    enough that coefficients move by under 2e-4 when it halves. Meant
    for million-row truth constants where the exact LP is impractical;
    sample-size fits use the exact LP solver instead.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    sw = np.full(n, 1.0 / n)
    qscale = max(abs(np.quantile(y, tau)), 1e-3 * np.std(y))
    h_final = 0.01 * qscale

    def loss(b, h):
        r = y - X @ b
        u = r / h
        return float(np.dot(sw, r * (tau - ndtr(-u)) + h * np.exp(-0.5 * u * u) * _INV_SQRT_2PI))

    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    for h in (27 * h_final, 9 * h_final, 3 * h_final, h_final):
        for _ in range(80):
            r = y - X @ beta
            u = -r / h
            grad = X.T @ (sw * (ndtr(u) - tau))
            if np.max(np.abs(grad)) < tol:
                break
            dens = np.exp(-0.5 * u * u) * _INV_SQRT_2PI / h
            H = (X * (sw * dens)[:, None]).T @ X
            step = np.linalg.solve(H + 1e-13 * np.trace(H) * np.eye(X.shape[1]), -grad)
            f0 = loss(beta, h)
            dd = float(grad @ step)
            t = 1.0
            while t > 1e-13 and loss(beta + t * step, h) > f0 + 1e-4 * t * dd:
                t *= 0.5
            beta = beta + t * step
    return beta


def _draw_indices(pop: Population, n: int, rep_index: int, seed: int) -> np.ndarray:
    if n > pop.size:
        raise ConfigError(f"sample size {n} exceeds population size {pop.size}")
    rng = _stream(seed, 1, rep_index)
    return rng.choice(pop.size, size=n, replace=False)


def dataset_from_rows(pop: Population, idx: np.ndarray) -> Dataset:
    y = pop.outcome[idx].astype(float).copy()
    s = pop.observed[idx]
    y[s == 0] = np.nan
    return Dataset.from_arrays(
        y,
        pop.treatment[idx],
        s,
        pop.covariates[idx],
        covariate_names=("const", "x1", "x2"),
    )


def draw_sample(pop: Population, n: int, rep_index: int, seed: int = None) -> Dataset:
    """Without-replacement subsample; outcomes masked where S=0.

    Deterministic per (seed, rep_index); distinct replicates are
    independent draws and may reuse population rows across replicates.
    """
    seed = pop.seed if seed is None else seed
    return dataset_from_rows(pop, _draw_indices(pop, n, rep_index, seed))


@dataclass(frozen=True)
class CellSpec:
    """One misspecification cell: first-stage specs plus the second step."""

    ps_link: str
    ps_columns: tuple  # None -> all covariate columns
    miss_link: str
    miss_columns: tuple  # None -> all columns of Z
    second_step: str  # least_squares | binary_qmle_probit | quantile | quantile_log
    se_mean_mode: str = "misspecified_mean"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CellSpec":
        d = dict(d)
        for key in ("ps_columns", "miss_columns"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


ESTIMATION_CELLS = {
    ("ate_binary", 1): CellSpec("logit", None, "logit", None, "least_squares"),
    ("ate_binary", 2): CellSpec(
        "probit", ("const", "x2"), "probit", ("const", "x2", "treatment"), "least_squares"
    ),
    ("ate_binary", 3): CellSpec(
        "probit",
        ("const", "x2"),
        "probit",
        ("const", "x2", "treatment"),
        "binary_qmle_probit",
        se_mean_mode="correct_mean",
    ),
    ("qte_lognormal", 1): CellSpec("logit", None, "logit", None, "quantile"),
    ("qte_lognormal", 2): CellSpec(
        "probit", ("const", "x2"), "probit", ("const", "x2"), "quantile"
    ),
    ("qte_lognormal", 3): CellSpec(
        "probit", ("const", "x2"), "probit", ("const", "x2"), "quantile_log"
    ),
}


def registry_to_json() -> str:
    return json.dumps(
        {f"{d}/case{c}": cell.to_dict() for (d, c), cell in sorted(ESTIMATION_CELLS.items())},
        indent=2,
    )


def registry_from_json(text: str) -> dict:
    out = {}
    for key, val in json.loads(text).items():
        design, case = key.split("/case")
        out[(design, int(case))] = CellSpec.from_dict(val)
    return out


@dataclass(frozen=True)
class ScenarioConfig:
    design: str
    case: int
    n: int = 5000
    reps: int = 500
    seed: int = 20260810
    population_size: int = 1_000_000
    taus: tuple = (0.25,)
    variants: tuple = VARIANTS
    compute_se: bool = False
    compute_rif: bool = False
    n_jobs: int = 1
    grid_size: int = 25

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise ConfigError(f"unknown design '{self.design}'")
        if self.case not in (1, 2, 3):
            raise ConfigError(f"case must be 1, 2, or 3, got {self.case}")
        if self.reps < 1:
            raise ConfigError("reps must be at least 1")
        if self.n > self.population_size:
            raise ConfigError("sample size exceeds population size")
        for t in self.taus:
            if not 0.0 < t < 1.0:
                raise ConfigError(f"tau {t} outside (0,1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class McResult:
    """Per-replicate estimates plus population truths and summaries."""

    config: ScenarioConfig
    truths: dict
    records: "pd.DataFrame"
    curves: dict
    failures: int
    eigmin_by_rep: np.ndarray = None

    def summary(self) -> dict:
        out = {}
        grouped = self.records[self.records.estimand != "ate_se"].groupby(
            ["variant", "estimand", "tau"], dropna=False
        )
        for (variant, estimand, tau), frame in grouped:
            vals = frame.value.to_numpy()
            truth = self._truth_for(estimand, tau)
            key = f"{variant}/{estimand}" + ("" if np.isnan(tau) else f"@{tau:g}")
            entry = {
                "mean": float(vals.mean()),
                "sd": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
                "mc_se": float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0,
                "reps": int(len(vals)),
            }
            if truth is not None:
                entry["truth"] = truth
                entry["bias"] = entry["mean"] - truth
            out[key] = entry
        return out

    def _truth_for(self, estimand: str, tau: float):
        if estimand == "ate":
            return self.truths.get("ate")
        if estimand in ("uqte_direct", "uqte_rif") and not np.isnan(tau):
            return self.truths.get(f"uqte@{tau:g}")
        return None

    def estimates(self, variant: str, estimand: str, tau: float = None) -> np.ndarray:
        frame = self.records
        mask = (frame.variant == variant) & (frame.estimand == estimand)
        if tau is not None:
            mask &= frame.tau == tau
        return frame[mask].sort_values("rep").value.to_numpy()

    def to_summary_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "truths": self.truths,
            "failures": self.failures,
            "summary": self.summary(),
        }


def _second_step_fits(ds, ws, cell):
    if cell.second_step == "least_squares":
        return solve_weighted_ls(ds, ws, 1), solve_weighted_ls(ds, ws, 0)
    if cell.second_step == "binary_qmle_probit":
        return (
            solve_weighted_binary_qmle(ds, ws, 1, link="probit"),
            solve_weighted_binary_qmle(ds, ws, 0, link="probit"),
        )
    raise ConfigError(f"second step '{cell.second_step}' is not mean-type")


def _run_rep_ate(ds: Dataset, cfg: ScenarioConfig, cell: CellSpec, rep: int):
    ps = fit_propensity(ds, spec=cell.ps_columns, link=cell.ps_link)
    miss = fit_missingness(ds, spec=cell.miss_columns, link=cell.miss_link)
    rows, eigmin = [], None
    for variant in cfg.variants:
        ws = compute_weights(ps, miss, ds, variant)
        fit1, fit0 = _second_step_fits(ds, ws, cell)
        eff = ate_separate(fit1, fit0, ds, variant=variant)
        rows.append((rep, variant, "ate", np.nan, eff.point))
        if variant == "d_weighted":
            v1 = sandwich_theta(fit1, ps, miss, mode="adjusted")
            v0 = sandwich_theta(fit0, ps, miss, mode="adjusted")
            eigmin = min(
                float(np.linalg.eigvalsh(v.components["sigma"] - v.components["omega"]).min())
                for v in (v1, v0)
            )
            if cfg.compute_se:
                var = ate_variance(fit1, fit0, ps, miss, ds, mean_mode=cell.se_mean_mode)
                rows.append((rep, variant, "ate_se", np.nan, var.scalar_se()))
    return rows, eigmin, None


def _run_rep_qte(ds: Dataset, cfg: ScenarioConfig, cell: CellSpec, rep: int):
    ps = fit_propensity(ds, spec=cell.ps_columns, link=cell.ps_link)
    miss = fit_missingness(ds, spec=cell.miss_columns, link=cell.miss_link)
    rows, coefs = [], {}
    log_outcome = None
    if cell.second_step == "quantile_log":
        log_outcome = np.log(np.where(ds.observed == 1, ds.outcome_filled(1.0), 1.0))
    for variant in cfg.variants:
        ws = compute_weights(ps, miss, ds, variant)
        for tau in cfg.taus:
            eff = uqte_direct(ds, ws, tau, variant=variant)
            rows.append((rep, variant, "uqte_direct", tau, eff.point))
            if cfg.compute_rif:
                rows.append((rep, variant, "uqte_rif", tau, uqte_rif(ds, ws, tau).point))
            q1 = solve_weighted_qr(ds, ws, 1, tau, outcome=log_outcome)
            q0 = solve_weighted_qr(ds, ws, 0, tau, outcome=log_outcome)
            coefs[(variant, tau)] = (q1.theta, q0.theta)
    return rows, None, coefs


def _run_rep(args):
    pop, cfg, cell, rep = args
    ds = draw_sample(pop, cfg.n, rep, cfg.seed)
    try:
        if cfg.design == "ate_binary":
            return _run_rep_ate(ds, cfg, cell, rep)
        return _run_rep_qte(ds, cfg, cell, rep)
    except DwmestError as exc:
        return ("failed", rep, str(exc)), None, None


def _x1_grid(pop: Population, size: int) -> np.ndarray:
    x1 = np.linspace(
        np.quantile(pop.covariates[:, 1], 0.01), np.quantile(pop.covariates[:, 1], 0.99), size
    )
    x2bar = float(pop.covariates[:, 2].mean())
    return np.column_stack([np.ones(size), x1, np.full(size, x2bar)])


def _qte_truth_entries(pop: Population, cfg: ScenarioConfig) -> dict:
    out = {}
    for tau in cfg.taus:
        q1 = np.quantile(pop.y_treated, tau, method="inverted_cdf")
        q0 = np.quantile(pop.y_control, tau, method="inverted_cdf")
        out[f"uqte@{tau:g}"] = float(q1 - q0)
        out[f"q_treated@{tau:g}"] = float(q1)
        out[f"q_control@{tau:g}"] = float(q0)
    return out


def _build_curves(pop, cfg, cell, all_coefs) -> dict:
    """Average estimated effect curves along x1 against the truth curve."""
    grid = _x1_grid(pop, cfg.grid_size)
    curves = {}
    exp_route = cell.second_step == "quantile_log"
    for tau in cfg.taus:
        frame = {"x1": grid[:, 1]}
        if exp_route:
            shift = ndtr_inv(tau)
            truth = np.exp(grid @ LOGNORMAL_INDEX_TREATED + shift) - np.exp(
                grid @ LOGNORMAL_INDEX_CONTROL + shift
            )
        else:
            t1 = pop.lp_quantile_truth(tau, 1)
            t0 = pop.lp_quantile_truth(tau, 0)
            truth = grid @ (t1 - t0)
        frame["truth"] = truth
        sd_cols = {}
        for variant in cfg.variants:
            reps_curves = []
            for coefs in all_coefs:
                if coefs is None or (variant, tau) not in coefs:
                    continue
                th1, th0 = coefs[(variant, tau)]
                if exp_route:
                    reps_curves.append(np.exp(grid @ th1) - np.exp(grid @ th0))
                else:
                    reps_curves.append(grid @ (th1 - th0))
            if reps_curves:
                arr = np.asarray(reps_curves)
                frame[variant] = arr.mean(axis=0)
                sd_cols[f"{variant}_sd"] = arr.std(axis=0, ddof=1) if len(arr) > 1 else np.zeros(cfg.grid_size)
            else:
                frame[variant] = np.full(cfg.grid_size, np.nan)
                sd_cols[f"{variant}_sd"] = np.full(cfg.grid_size, np.nan)
        frame.update(sd_cols)
        key = ("cqte" if exp_route else "lp_cqte") + f"@{tau:g}"
        df = pd.DataFrame(frame)
        df.insert(0, "tau", tau)
        df.insert(0, "kind", "cqte" if exp_route else "lp_cqte")
        curves[key] = df
    return curves


def ndtr_inv(tau: float) -> float:
    return float(ndtri(tau))


def run_scenario(cfg: ScenarioConfig) -> McResult:
    """Run one misspecification cell of the scenario grid.

    Replicate failures are dropped and counted; more than 5% failing
    raises ReliabilityError. Output is deterministic for a fixed config
    (including seed) regardless of n_jobs.
    """
    pop = get_population(cfg.design, cfg.seed, cfg.population_size)
    cell = ESTIMATION_CELLS[(cfg.design, cfg.case)]
    tasks = ((pop, cfg, cell, rep) for rep in range(cfg.reps))
    if cfg.n_jobs != 1:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=cfg.n_jobs, batch_size=8)(
            delayed(_run_rep)(t) for t in tasks
        )
    else:
        results = [_run_rep(t) for t in tasks]

    rows, eigmins, all_coefs, failures = [], [], [], 0
    for rep_rows, eigmin, coefs in results:
        if isinstance(rep_rows, tuple) and rep_rows and rep_rows[0] == "failed":
            failures += 1
            all_coefs.append(None)
            continue
        rows.extend(rep_rows)
        all_coefs.append(coefs)
        if eigmin is not None:
            eigmins.append(eigmin)
    if failures > 0.05 * cfg.reps:
        raise ReliabilityError(f"{failures}/{cfg.reps} replicates failed")

    records = pd.DataFrame(rows, columns=["rep", "variant", "estimand", "tau", "value"])
    truths = dict(pop.truths)
    curves = {}
    if cfg.design == "qte_lognormal":
        truths.update(_qte_truth_entries(pop, cfg))
        for tau in cfg.taus:
            truths[f"lp_coef_treated@{tau:g}"] = pop.lp_quantile_truth(tau, 1).tolist()
            truths[f"lp_coef_control@{tau:g}"] = pop.lp_quantile_truth(tau, 0).tolist()
        curves = _build_curves(pop, cfg, cell, all_coefs)
    return McResult(
        config=cfg,
        truths=truths,
        records=records,
        curves=curves,
        failures=failures,
        eigmin_by_rep=np.asarray(eigmins) if eigmins else None,
    )


def run_paired_known_weights(cfg: ScenarioConfig) -> dict:
    """Case-1 paired runs: estimated versus known d-weights on identical draws.

    Returns per-coefficient replicate arrays for both routes plus the
    per-replicate minimum eigenvalue of Sigma - Omega, feeding the
    efficiency diagnostics.
    """
    if (cfg.design, cfg.case) != ("ate_binary", 1):
        raise ConfigError("paired known-weight runs are defined for ate_binary case 1")
    pop = get_population(cfg.design, cfg.seed, cfg.population_size)
    cell = ESTIMATION_CELLS[(cfg.design, cfg.case)]
    estimated, known, eigmins = {}, {}, []
    labels = [f"theta_treated[{j}]" for j in range(3)] + [f"theta_control[{j}]" for j in range(3)]
    for lab in labels:
        estimated[lab] = np.empty(cfg.reps)
        known[lab] = np.empty(cfg.reps)
    for rep in range(cfg.reps):
        idx = _draw_indices(pop, cfg.n, rep, cfg.seed)
        ds = dataset_from_rows(pop, idx)
        ps = fit_propensity(ds, spec=cell.ps_columns, link=cell.ps_link)
        miss = fit_missingness(ds, spec=cell.miss_columns, link=cell.miss_link)
        ws_est = compute_weights(ps, miss, ds, "d_weighted")
        ws_true = weights_from_probabilities(
            ds, pop.true_treat_prob[idx], pop.true_miss_prob[idx], "d_weighted"
        )
        fits_est = solve_weighted_ls(ds, ws_est, 1), solve_weighted_ls(ds, ws_est, 0)
        fits_true = solve_weighted_ls(ds, ws_true, 1), solve_weighted_ls(ds, ws_true, 0)
        for j in range(3):
            estimated[f"theta_treated[{j}]"][rep] = fits_est[0].theta[j]
            estimated[f"theta_control[{j}]"][rep] = fits_est[1].theta[j]
            known[f"theta_treated[{j}]"][rep] = fits_true[0].theta[j]
            known[f"theta_control[{j}]"][rep] = fits_true[1].theta[j]
        rep_eigmin = np.inf
        for f in fits_est:
            v = sandwich_theta(f, ps, miss, "adjusted")
            gap = v.components["sigma"] - v.components["omega"]
            rep_eigmin = min(rep_eigmin, float(np.linalg.eigvalsh(gap).min()))
        eigmins.append(rep_eigmin)
    return {"estimated": estimated, "known": known, "eigmin": np.asarray(eigmins)}


SCENARIO_IDS = {
    f"{d.split('_')[0]}-case{c}": (d, c) for (d, c) in ESTIMATION_CELLS
}


def config_from_scenario_id(scenario: str, **overrides) -> ScenarioConfig:
    if scenario not in SCENARIO_IDS:
        raise ConfigError(
            f"unknown scenario '{scenario}'; registry: {sorted(SCENARIO_IDS)}"
        )
    design, case = SCENARIO_IDS[scenario]
    return ScenarioConfig(design=design, case=case, **overrides)
