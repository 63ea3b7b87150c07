import json

import numpy as np
import pandas as pd
import pytest

from dwplots import ColumnError, PlotRequest, SchemaVersionError, render
from dwplots.render import main


@pytest.fixture
def sims_csv(tmp_path):
    """Replicate-level estimates shaped like the estimator CLI's sims.csv."""
    rng = np.random.default_rng(42)
    rows = []
    for variant, center in (("unweighted", 0.110), ("ps_weighted", 0.098), ("d_weighted", 0.097)):
        for rep in range(120):
            rows.append((rep, variant, "ate", np.nan, center + rng.normal() * 0.013))
        for tau in (0.25, 0.5, 0.75):
            for rep in range(40):
                rows.append((rep, variant, "uqte_direct", tau, 0.01 * tau + rng.normal() * 0.02))
    frame = pd.DataFrame(rows, columns=["rep", "variant", "estimand", "tau", "value"])
    path = tmp_path / "sims.csv"
    frame.to_csv(path, index=False)
    return path


@pytest.fixture
def curves_csv(tmp_path):
    x1 = np.linspace(-3, 5, 25)
    truth = 0.7 - 0.06 * x1
    frame = pd.DataFrame({
        "kind": "lp_cqte",
        "tau": 0.25,
        "x1": x1,
        "truth": truth,
        "unweighted": truth + 0.1,
        "ps_weighted": truth + 0.04,
        "d_weighted": truth + 0.005,
    })
    path = tmp_path / "curves.csv"
    frame.to_csv(path, index=False)
    return path


@pytest.fixture
def results_json(tmp_path):
    rng = np.random.default_rng(3)
    payload = {
        "schema_version": 1,
        "weight_distributions": {
            "treated_composite": rng.uniform(0.05, 0.5, 300).tolist(),
            "control_composite": rng.uniform(0.1, 0.7, 400).tolist(),
        },
    }
    path = tmp_path / "results.json"
    path.write_text(json.dumps(payload))
    return path


def test_density_panel_with_truth_line(sims_csv, tmp_path):
    out = tmp_path / "density.png"
    render(PlotRequest("estimate_density", str(sims_csv), str(out), truth=0.096))
    assert out.exists() and out.stat().st_size > 2000


def test_bias_curve(curves_csv, tmp_path):
    out = tmp_path / "bias.png"
    render(PlotRequest("bias_curve", str(curves_csv), str(out), tau=0.25))
    assert out.exists() and out.stat().st_size > 2000


def test_bias_curve_identical_columns_is_flat_zero(tmp_path):
    x1 = np.linspace(0, 1, 10)
    frame = pd.DataFrame({"x1": x1, "truth": 1 + x1, "d_weighted": 1 + x1})
    path = tmp_path / "c.csv"
    frame.to_csv(path, index=False)
    # the rendered bias series is identically zero; verify via the data path
    bias = frame["d_weighted"] - frame["truth"]
    assert (bias == 0).all()
    out = tmp_path / "flat.png"
    render(PlotRequest("bias_curve", str(path), str(out)))
    assert out.exists()


def test_quantile_profile(sims_csv, tmp_path):
    out = tmp_path / "profile.png"
    render(PlotRequest("quantile_profile", str(sims_csv), str(out), estimand="uqte_direct"))
    assert out.exists() and out.stat().st_size > 2000


def test_weight_overlap(results_json, tmp_path):
    out = tmp_path / "overlap.png"
    render(PlotRequest("weight_overlap", str(results_json), str(out)))
    assert out.exists() and out.stat().st_size > 2000


def test_byte_determinism(sims_csv, tmp_path):
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    for out in (a, b):
        render(PlotRequest("estimate_density", str(sims_csv), str(out), truth=0.096))
    assert a.read_bytes() == b.read_bytes()


def test_svg_determinism(curves_csv, tmp_path):
    a, b = tmp_path / "a.svg", tmp_path / "b.svg"
    for out in (a, b):
        render(PlotRequest("bias_curve", str(curves_csv), str(out)))
    assert a.read_bytes() == b.read_bytes()


def test_schema_version_rejection(tmp_path):
    bad = tmp_path / "old.json"
    bad.write_text(json.dumps({"schema_version": 99, "weight_distributions": {}}))
    with pytest.raises(SchemaVersionError):
        render(PlotRequest("weight_overlap", str(bad), str(tmp_path / "x.png")))


def test_missing_columns_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    pd.DataFrame({"a": [1]}).to_csv(path, index=False)
    with pytest.raises(ColumnError):
        render(PlotRequest("estimate_density", str(path), str(tmp_path / "x.png")))
    with pytest.raises(ColumnError):
        render(PlotRequest("bias_curve", str(path), str(tmp_path / "x.png")))


def test_unknown_kind_rejected(sims_csv, tmp_path):
    from dwplots import PlotError

    with pytest.raises(PlotError):
        PlotRequest("pie_chart", str(sims_csv), str(tmp_path / "x.png"))


def test_cli_flags(sims_csv, tmp_path):
    out = tmp_path / "cli.png"
    rc = main([
        "--kind", "estimate_density", "--input", str(sims_csv),
        "--out", str(out), "--truth", "0.096",
    ])
    assert rc == 0 and out.exists()


def test_cli_config_file(curves_csv, tmp_path):
    cfg = tmp_path / "req.json"
    out = tmp_path / "from_config.png"
    cfg.write_text(json.dumps({
        "kind": "bias_curve", "input_path": str(curves_csv), "output_path": str(out),
    }))
    rc = main(["--config", str(cfg)])
    assert rc == 0 and out.exists()


def test_cli_version_error_exit_code(tmp_path):
    bad = tmp_path / "old.json"
    bad.write_text(json.dumps({"schema_version": 0}))
    rc = main([
        "--kind", "weight_overlap", "--input", str(bad), "--out", str(tmp_path / "x.png"),
    ])
    assert rc == 2
