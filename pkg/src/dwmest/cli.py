"""Batch command line: estimate effects from a CSV, run scenario grids,
and produce efficiency diagnostics, all as machine-readable JSON/CSV.

Exit codes: 0 success, 2 configuration, 3 data/schema, 4 numerical.
Output files are written atomically (temp file + rename); a failed run
leaves no partial artifacts and prints one JSON error object.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

import numpy as np
import pandas as pd

from . import __version__
from .binary import fit_missingness, fit_propensity
from .data import load_csv, summary_stats
from .effects import RifConfig, ate_pooled, ate_separate, uqte_direct, uqte_rif
from .errors import (
    ConfigError,
    ConvergenceError,
    DensityInstabilityError,
    DwmestError,
    EstimationInfeasibleError,
    RankError,
    ReliabilityError,
    SchemaError,
    SeparationError,
)
from .estimators import _solve_arm
from .inference import ate_variance, efficiency_report, pairs_bootstrap
from .simulation import (
    ScenarioConfig,
    config_from_scenario_id,
    run_paired_known_weights,
    run_scenario,
)
from .weights import VARIANTS, compute_weights, trim

SCHEMA_VERSION = 1


def _error_category(exc: Exception) -> tuple:
    if isinstance(exc, ConfigError):
        return "config", 2
    if isinstance(exc, SchemaError):
        return "schema", 3
    if isinstance(exc, RankError):
        return "rank", 4
    if isinstance(exc, (ConvergenceError, SeparationError)):
        return "convergence", 4
    if isinstance(exc, (EstimationInfeasibleError, DensityInstabilityError)):
        return "infeasible", 4
    if isinstance(exc, ReliabilityError):
        return "reliability", 4
    return "internal", 4


def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".dwmest-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _dump(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n"


def _comma_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _comma_floats(text):
    return [float(t) for t in _comma_list(text)]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dwmest", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate treatment effects from a CSV")
    est.add_argument("--data", required=True)
    est.add_argument("--outcome", required=True)
    est.add_argument("--treatment", required=True)
    est.add_argument("--observed", default=None)
    est.add_argument("--covariates", required=True, type=_comma_list)
    est.add_argument("--missing-token", default="NA")
    est.add_argument("--ps-link", default="logit", choices=("logit", "probit"))
    est.add_argument("--miss-link", default="logit", choices=("logit", "probit"))
    est.add_argument("--ps-columns", type=_comma_list, default=None)
    est.add_argument("--miss-columns", type=_comma_list, default=None)
    est.add_argument("--variants", type=_comma_list, default=list(VARIANTS))
    est.add_argument("--mean-model", default="linear", choices=("linear", "logit", "probit", "poisson"))
    est.add_argument("--pooled", action="store_true", help="also report the pooled-slopes ATE")
    est.add_argument("--estimands", type=_comma_list, default=["ate"],
                     help="comma list from {ate, uqte}")
    est.add_argument("--taus", type=_comma_floats, default=[0.25, 0.5, 0.75])
    est.add_argument("--trim", nargs=2, type=float, default=(0.0, 1.0), metavar=("LO", "HI"))
    est.add_argument("--se-mean-mode", default=None,
                     choices=("correct_mean", "misspecified_mean"),
                     help="which analytic ATE variance applies; required for analytic "
                          "standard errors because the right middle matrix depends on "
                          "whether the conditional mean or the weights are trusted "
                          "(correct_mean uses the unadjusted arm covariances, "
                          "misspecified_mean the first-stage-adjusted ones)")
    est.add_argument("--bootstrap", type=int, default=0, metavar="B",
                     help="pairs-bootstrap replications (0 = analytic/none)")
    est.add_argument("--seed", type=int, default=0)
    est.add_argument("--threads", type=int, default=os.cpu_count())
    est.add_argument("--out", required=True)

    sim = sub.add_parser("simulate", help="run a Monte Carlo scenario")
    sim.add_argument("--scenario", required=True)
    sim.add_argument("--n", type=int, default=5000)
    sim.add_argument("--reps", type=int, default=500)
    sim.add_argument("--seed", type=int, default=20260810)
    sim.add_argument("--population-size", type=int, default=1_000_000)
    sim.add_argument("--taus", type=_comma_floats, default=[0.25])
    sim.add_argument("--compute-se", action="store_true")
    sim.add_argument("--rif", action="store_true", help="also record RIF-route quantile effects")
    sim.add_argument("--threads", type=int, default=1)
    sim.add_argument("--out-summary", required=True)
    sim.add_argument("--out-reps", required=True)
    sim.add_argument("--out-curves", default=None)

    diag = sub.add_parser("diagnose", help="efficiency-corollary diagnostics on paired runs")
    diag.add_argument("--n", type=int, default=5000)
    diag.add_argument("--reps", type=int, default=300)
    diag.add_argument("--seed", type=int, default=20260810)
    diag.add_argument("--threads", type=int, default=1)
    diag.add_argument("--out", required=True)
    return parser


def _resolved_config(args: argparse.Namespace) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k != "command"}
    cfg["command"] = args.command
    return cfg


def cmd_estimate(args) -> dict:
    if not args.variants or any(v not in VARIANTS for v in args.variants):
        raise ConfigError(f"variants must come from {VARIANTS}, got {args.variants}")
    bad = [e for e in args.estimands if e not in ("ate", "uqte")]
    if bad:
        raise ConfigError(f"unknown estimand(s) {bad}; expected 'ate' and/or 'uqte'")
    if "ate" in args.estimands and not args.bootstrap and args.se_mean_mode is None:
        raise ConfigError(
            "analytic ATE standard errors need an explicit --se-mean-mode "
            "(correct_mean or misspecified_mean); alternatively pass --bootstrap B"
        )
    column_map = {
        "outcome": args.outcome,
        "treatment": args.treatment,
        "covariates": args.covariates,
    }
    if args.observed:
        column_map["observed"] = args.observed
    ds = load_csv(args.data, column_map, missing_token=args.missing_token)

    ps = fit_propensity(ds, spec=args.ps_columns, link=args.ps_link)
    miss = fit_missingness(ds, spec=args.miss_columns, link=args.miss_link)
    lo, hi = args.trim

    def run_pipeline(data):
        """Full re-estimation on `data`; returns the stacked point vector."""
        ps_b = fit_propensity(data, spec=args.ps_columns, link=args.ps_link)
        miss_b = fit_missingness(data, spec=args.miss_columns, link=args.miss_link)
        points = []
        for variant in args.variants:
            ws = compute_weights(ps_b, miss_b, data, variant)
            if (lo, hi) != (0.0, 1.0):
                ws = trim(ws, lo, hi)
            keep = np.flatnonzero(ws.trim_mask)
            if "ate" in args.estimands:
                f1 = _solve_arm(data, ws, 1, args.mean_model)
                f0 = _solve_arm(data, ws, 0, args.mean_model)
                points.append(ate_separate(f1, f0, data, keep=keep).point)
                if args.pooled:
                    family = {"linear": "gaussian_identity", "logit": "bernoulli_logit",
                              "poisson": "poisson_log"}.get(args.mean_model)
                    if family is None:
                        raise ConfigError("pooled fits need a canonical-link mean model")
                    points.append(ate_pooled(data, ws, family).point)
            if "uqte" in args.estimands:
                for tau in args.taus:
                    points.append(uqte_direct(data, ws, tau).point)
                    points.append(uqte_rif(data, ws, tau, RifConfig(tau=tau)).point)
        return np.asarray(points)

    boot = None
    if args.bootstrap:
        boot = pairs_bootstrap(ds, run_pipeline, args.bootstrap, args.seed, n_jobs=args.threads)

    estimates = []
    slot = 0
    trim_report = {}
    for variant in args.variants:
        ws = compute_weights(ps, miss, ds, variant)
        if (lo, hi) != (0.0, 1.0):
            ws = trim(ws, lo, hi)
        trim_report = ws.to_dict()
        keep = np.flatnonzero(ws.trim_mask)

        def _push(effect, **extra):
            # slot order must mirror run_pipeline so bootstrap SEs line up
            nonlocal slot
            rec = effect.to_dict()
            if boot is not None:
                rec["se"] = float(boot.se[slot])
                rec["se_method"] = "bootstrap"
            rec.update(extra)
            slot += 1
            estimates.append(rec)
            return rec

        if "ate" in args.estimands:
            f1 = _solve_arm(ds, ws, 1, args.mean_model)
            f0 = _solve_arm(ds, ws, 0, args.mean_model)
            eff = ate_separate(f1, f0, ds, keep=keep, variant=variant)
            rec = _push(eff)
            if boot is None:
                var = ate_variance(f1, f0, ps, miss, ds, mean_mode=args.se_mean_mode, rows=keep)
                rec["se"] = var.scalar_se()
                rec["se_method"] = f"analytic[{args.se_mean_mode}]"
            if args.pooled:
                family = {"linear": "gaussian_identity", "logit": "bernoulli_logit",
                          "poisson": "poisson_log"}.get(args.mean_model)
                if family is None:
                    raise ConfigError("pooled fits need a canonical-link mean model")
                _push(ate_pooled(ds, ws, family))
        if "uqte" in args.estimands:
            for tau in args.taus:
                direct = uqte_direct(ds, ws, tau)
                rif = uqte_rif(ds, ws, tau, RifConfig(tau=tau))
                _push(direct)
                _push(rif, gap_vs_direct=rif.point - direct.point)

    ws_diag = compute_weights(ps, miss, ds, "d_weighted")
    payload = {
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "config": _resolved_config(args),
        "data_summary": summary_stats(ds),
        "weight_models": {"propensity": ps.to_dict(), "missingness": miss.to_dict()},
        "trim_report": trim_report,
        "clip_warnings": ps.n_clipped + miss.n_clipped,
        "weight_distributions": {
            "treated_composite": ws_diag.own_composite[ds.treatment == 1].tolist(),
            "control_composite": ws_diag.own_composite[ds.treatment == 0].tolist(),
        },
        "estimates": estimates,
    }
    if boot is not None:
        payload["bootstrap"] = {"replications": boot.replications,
                                "failures": boot.components["failures"]}
    _atomic_write(args.out, _dump(payload))
    return payload


def cmd_simulate(args) -> dict:
    cfg = config_from_scenario_id(
        args.scenario,
        n=args.n,
        reps=args.reps,
        seed=args.seed,
        population_size=args.population_size,
        taus=tuple(args.taus),
        compute_se=args.compute_se,
        compute_rif=args.rif,
        n_jobs=args.threads,
    )
    result = run_scenario(cfg)
    payload = result.to_summary_dict()
    payload["schema_version"] = SCHEMA_VERSION
    payload["version"] = __version__
    payload["scenario"] = args.scenario

    _atomic_write(args.out_reps, result.records.to_csv(index=False))
    if args.out_curves:
        if result.curves:
            frame = pd.concat(list(result.curves.values()), ignore_index=True)
            _atomic_write(args.out_curves, frame.to_csv(index=False))
        else:
            raise ConfigError(
                f"scenario '{args.scenario}' produces no curves (ATE designs have none)"
            )
    _atomic_write(args.out_summary, _dump(payload))
    return payload


def cmd_diagnose(args) -> dict:
    paired_cfg = ScenarioConfig(
        design="ate_binary", case=1, n=args.n, reps=args.reps, seed=args.seed
    )
    paired = run_paired_known_weights(paired_cfg)
    case3 = run_scenario(
        ScenarioConfig(
            design="ate_binary",
            case=3,
            n=args.n,
            reps=args.reps,
            seed=args.seed,
            variants=("unweighted", "d_weighted"),
            n_jobs=args.threads,
        )
    )
    report = efficiency_report(
        estimated_weights=paired["estimated"],
        known_weights=paired["known"],
        unweighted_ate=case3.estimates("unweighted", "ate"),
        dweighted_ate=case3.estimates("d_weighted", "ate"),
        eigmin_sigma_minus_omega=paired["eigmin"],
    )
    payload = {
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "config": _resolved_config(args),
        "report": report,
        "verdicts": {
            "corollary1": "pass" if report["corollary1_pass"] else "fail",
            "corollary3": "pass" if report["corollary3"]["pass"] else "fail",
            "psd": "pass" if report["psd_check"]["pass"] else "fail",
        },
    }
    _atomic_write(args.out, _dump(payload))
    return payload


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "estimate":
            cmd_estimate(args)
        elif args.command == "simulate":
            cmd_simulate(args)
        elif args.command == "diagnose":
            cmd_diagnose(args)
        return 0
    except DwmestError as exc:
        category, code = _error_category(exc)
        sys.stdout.write(_dump({"error": {"category": category, "message": str(exc)}}))
        return code
    except Exception as exc:  # pragma: no cover - safety net
        sys.stdout.write(_dump({"error": {"category": "internal", "message": repr(exc)}}))
        return 4


if __name__ == "__main__":
    sys.exit(main())
