"""Render figures from dwmest output files.

Four figure kinds, all fed exclusively by the estimator CLI's files
(sims.csv, curves.csv, results.json); the renderer never recomputes
statistics beyond kernel densities of the provided samples.

  estimate_density  per-variant densities of replicate estimates with an
                    optional vertical truth line (sims.csv)
  bias_curve        estimate-minus-truth curves along x1 (curves.csv)
  quantile_profile  mean estimate per quantile level per variant (sims.csv)
  weight_overlap    composite-probability densities for the treated and
                    control groups (results.json)

Rendering is deterministic: fixed style, fixed dpi, no timestamps.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, fields

import matplotlib
import numpy as np
import pandas as pd

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

SUPPORTED_SCHEMA = 1
KINDS = ("estimate_density", "bias_curve", "quantile_profile", "weight_overlap")
VARIANTS = ("unweighted", "ps_weighted", "d_weighted")
COLORS = {"unweighted": "#d62728", "ps_weighted": "#1f77b4", "d_weighted": "#2ca02c"}
LABELS = {"unweighted": "unweighted", "ps_weighted": "ps-weighted", "d_weighted": "d-weighted"}


class PlotError(Exception):
    pass


class SchemaVersionError(PlotError):
    pass


class ColumnError(PlotError):
    pass


@dataclass(frozen=True)
class PlotRequest:
    kind: str
    input_path: str
    output_path: str
    truth: float = None
    estimand: str = None
    tau: float = None
    bandwidth: float = None
    title: str = None
    dpi: int = 150

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PlotError(f"unknown plot kind '{self.kind}' (expected one of {KINDS})")


def silverman_bandwidth(values: np.ndarray) -> float:
    sd = values.std()
    q75, q25 = np.percentile(values, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    if spread <= 0:
        spread = max(abs(values.mean()), 1.0) * 1e-3
    return 0.9 * spread * len(values) ** (-0.2)


def gaussian_kde(values: np.ndarray, grid: np.ndarray, bandwidth: float) -> np.ndarray:
    z = (grid[:, None] - values[None, :]) / bandwidth
    return np.exp(-0.5 * z * z).sum(axis=1) / (len(values) * bandwidth * np.sqrt(2 * np.pi))


def _require_columns(frame: pd.DataFrame, cols, path):
    missing = [c for c in cols if c not in frame.columns]
    if missing:
        raise ColumnError(f"{path} is missing column(s) {missing}; have {list(frame.columns)}")


def _load_records(req: PlotRequest) -> pd.DataFrame:
    frame = pd.read_csv(req.input_path)
    _require_columns(frame, ["rep", "variant", "estimand", "tau", "value"], req.input_path)
    return frame


def _new_axes(req: PlotRequest):
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    if req.title:
        ax.set_title(req.title)
    return fig, ax


def _variant_iter(frame):
    for variant in VARIANTS:
        sub = frame[frame.variant == variant]
        if len(sub):
            yield variant, sub


def render_estimate_density(req: PlotRequest):
    frame = _load_records(req)
    estimand = req.estimand or "ate"
    sub = frame[frame.estimand == estimand]
    if req.tau is not None:
        sub = sub[sub.tau == req.tau]
    if not len(sub):
        raise ColumnError(f"no rows for estimand '{estimand}' in {req.input_path}")
    fig, ax = _new_axes(req)
    lo = sub.value.min()
    hi = sub.value.max()
    pad = 0.15 * (hi - lo if hi > lo else max(abs(hi), 1.0))
    grid = np.linspace(lo - pad, hi + pad, 400)
    for variant, rows in _variant_iter(sub):
        vals = rows.value.to_numpy()
        h = req.bandwidth or silverman_bandwidth(vals)
        ax.plot(grid, gaussian_kde(vals, grid, h), color=COLORS[variant], label=LABELS[variant])
    if req.truth is not None:
        ax.axvline(req.truth, color="black", linestyle="--", linewidth=1.2,
                   label=f"truth = {req.truth:g}")
    ax.set_xlabel(estimand + (f" (tau={req.tau:g})" if req.tau is not None else ""))
    ax.set_ylabel("density")
    ax.legend(frameon=False)
    return fig


def render_bias_curve(req: PlotRequest):
    frame = pd.read_csv(req.input_path)
    _require_columns(frame, ["x1", "truth"], req.input_path)
    if req.tau is not None and "tau" in frame.columns:
        frame = frame[frame.tau == req.tau]
    if not len(frame):
        raise ColumnError(f"no curve rows left after filtering in {req.input_path}")
    present = [v for v in VARIANTS if v in frame.columns]
    if not present:
        raise ColumnError(f"{req.input_path} carries no estimator columns {VARIANTS}")
    fig, ax = _new_axes(req)
    for variant in present:
        ax.plot(frame.x1, frame[variant] - frame.truth,
                color=COLORS[variant], label=LABELS[variant])
    ax.axhline(0.0, color="black", linestyle="--", linewidth=1.0, label="no bias")
    ax.set_xlabel("x1")
    ax.set_ylabel("bias relative to truth")
    ax.legend(frameon=False)
    return fig


def render_quantile_profile(req: PlotRequest):
    frame = _load_records(req)
    estimand = req.estimand or "uqte_direct"
    sub = frame[frame.estimand == estimand]
    if not len(sub):
        raise ColumnError(f"no rows for estimand '{estimand}' in {req.input_path}")
    fig, ax = _new_axes(req)
    for variant, rows in _variant_iter(sub):
        prof = rows.groupby("tau").value.mean().sort_index()
        ax.plot(prof.index, prof.to_numpy(), marker="o",
                color=COLORS[variant], label=LABELS[variant])
    if req.truth is not None:
        ax.axhline(req.truth, color="black", linestyle="--", linewidth=1.0,
                   label=f"truth = {req.truth:g}")
    ax.set_xlabel("quantile level")
    ax.set_ylabel(estimand)
    ax.legend(frameon=False)
    return fig


def render_weight_overlap(req: PlotRequest):
    with open(req.input_path) as fh:
        payload = json.load(fh)
    version = payload.get("schema_version")
    if version != SUPPORTED_SCHEMA:
        raise SchemaVersionError(
            f"{req.input_path} has schema_version {version}, renderer supports {SUPPORTED_SCHEMA}"
        )
    dists = payload.get("weight_distributions")
    if not dists or "treated_composite" not in dists or "control_composite" not in dists:
        raise ColumnError(f"{req.input_path} carries no weight_distributions block")
    fig, ax = _new_axes(req)
    grid = np.linspace(0.0, 1.0, 400)
    for key, label, color in (
        ("treated_composite", "treated", COLORS["d_weighted"]),
        ("control_composite", "control", COLORS["unweighted"]),
    ):
        vals = np.asarray(dists[key], dtype=float)
        h = req.bandwidth or silverman_bandwidth(vals)
        ax.plot(grid, gaussian_kde(vals, grid, h), color=color, label=label)
        ax.fill_between(grid, gaussian_kde(vals, grid, h), alpha=0.15, color=color)
    ax.set_xlabel("composite probability")
    ax.set_ylabel("density")
    ax.legend(frameon=False)
    return fig


_RENDERERS = {
    "estimate_density": render_estimate_density,
    "bias_curve": render_bias_curve,
    "quantile_profile": render_quantile_profile,
    "weight_overlap": render_weight_overlap,
}


def render(req: PlotRequest) -> str:
    """Produce the requested figure file and return its path."""
    with matplotlib.rc_context({"svg.hashsalt": "dwplots", "figure.max_open_warning": 0}):
        fig = _RENDERERS[req.kind](req)
        try:
            metadata = {"Date": None} if req.output_path.endswith(".svg") else {}
            fig.savefig(req.output_path, dpi=req.dpi, metadata=metadata)
        finally:
            plt.close(fig)
    return req.output_path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dwplots", description=__doc__)
    parser.add_argument("--config", help="JSON file with PlotRequest fields")
    parser.add_argument("--kind", choices=KINDS)
    parser.add_argument("--input", dest="input_path")
    parser.add_argument("--out", dest="output_path")
    parser.add_argument("--truth", type=float)
    parser.add_argument("--estimand")
    parser.add_argument("--tau", type=float)
    parser.add_argument("--bandwidth", type=float)
    parser.add_argument("--title")
    parser.add_argument("--dpi", type=int, default=150)
    return parser


def request_from_args(args) -> PlotRequest:
    values = {}
    if args.config:
        with open(args.config) as fh:
            values.update(json.load(fh))
    for f in fields(PlotRequest):
        cli_val = getattr(args, f.name, None)
        if cli_val is not None and not (f.name == "dpi" and cli_val == 150 and "dpi" in values):
            values[f.name] = cli_val
    for required in ("kind", "input_path", "output_path"):
        if not values.get(required):
            raise PlotError(f"missing required option '{required}'")
    return PlotRequest(**values)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        req = request_from_args(args)
        render(req)
        return 0
    except SchemaVersionError as exc:
        sys.stderr.write(f"version error: {exc}\n")
        return 2
    except (PlotError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
