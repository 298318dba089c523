import csv
import json
import math

import numpy as np
import pytest

from acelsr import experiment as ex

SMALL = dict(fractions=(0.6,), frameworks=("eps-lsr", "ace-lsr"), seeds=(0,), n_pairs=150, n_queries=30,
             n_val_queries=10, holdout_size=80, mm_epochs=2, lpm_epochs=3, sm_epochs=3, n_explore=5,
             latent_dim=4, w_grid=(-0.25, -0.05))


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    seen = []
    rep = ex.run_experiment(ex.ExperimentConfig(**SMALL), out_dir=out,
                            on_initial=lambda *a: seen.append(a[:2]))
    return rep, out, seen


def test_report_structure(small_run):
    rep, out, seen = small_run
    assert seen == [(0.6, 0)]
    assert len(rep["cells"]) == 2
    assert all(c["error"] is None for c in rep["cells"])
    for c in rep["cells"]:
        m = c["metrics"]
        assert m["pct_all"] <= m["pct_any"]
        assert m["w_eps"] in SMALL["w_grid"]
        assert [v["w_eps"] for v in c["validation"]] == list(SMALL["w_grid"])
    ace_cell = next(c for c in rep["cells"] if c["framework"] == "ace-lsr")
    assert [p["stage"] for p in ace_cell["provenance"]] == ["build_models", "augment", "update_models", "explore",
                                                             "build_lsr", "connect"]
    assert set(rep["series"]) == {"eps-lsr", "ace-lsr"}
    assert json.loads((out / "report.json").read_text())["config_hash"] == rep["config_hash"]


def test_csv_recomputes_aggregate(small_run):
    rep, out, _ = small_run
    with open(out / "results.csv") as fh:
        reader = csv.DictReader(fh)
        assert tuple(reader.fieldnames) == ex.CSV_COLUMNS
        rows = list(reader)
    assert len(rows) == 2 * len(ex.METRICS)
    for agg in rep["aggregate"]:
        vals = [float(r["value"]) for r in rows if r["framework"] == agg["framework"] and r["metric"] == "pct_any"]
        assert np.mean(vals) == pytest.approx(agg["pct_any"]["mean"])


def test_deterministic(small_run):
    rep, _, _ = small_run
    again = ex.run_experiment(ex.ExperimentConfig(**SMALL))
    for first, cell in zip(rep["cells"], again["cells"]):
        assert cell["config_hash"] == first["config_hash"]
        m1, m2 = dict(first["metrics"]), dict(cell["metrics"])
        m1.pop("seconds"), m2.pop("seconds")
        assert m1 == m2


def test_error_cells_are_recorded():
    # no similar pairs: latent statistics are undefined, so every cell fails but the run completes
    rep = ex.run_experiment(ex.ExperimentConfig(**{**SMALL, "similar_fraction": 0.0, "frameworks": ("eps-lsr",)}))
    assert len(rep["cells"]) == 1
    assert rep["cells"][0]["error"]["type"] == "RuntimeError"
    assert ex.csv_rows(rep) == []


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        ex.ExperimentConfig(frameworks=("nope",))
    with pytest.raises(ValueError):
        ex.ExperimentConfig(fractions=(0.0,))
    with pytest.raises(ValueError):
        ex.ExperimentConfig.from_dict({"bogus": 1})
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seeds": [4, 5], "mm_epochs": 7}))
    c = ex.ExperimentConfig.load(p)
    assert c.seeds == (4, 5) and c.mm_epochs == 7
    assert ex.ExperimentConfig.from_dict(c.as_dict()) == c
    assert ex.config_hash(c.as_dict()) == ex.config_hash(ex.ExperimentConfig.load(p).as_dict())
    assert c.pipeline("E_b", 3).explore == "random" and c.pipeline("E_b", 3).mm_train.seed == 3


def test_format_report(small_run):
    text = ex.format_report(small_run[0])
    assert "eps-lsr" in text and "ace-lsr" in text
    assert math.isfinite(small_run[0]["runtime_seconds"])
