import csv
import json

import numpy as np
import pytest
import yaml

from lsfqr.cli import main, read_coefficients
from lsfqr.design import load_dataset
from lsfqr.mesh import Triangulation
from lsfqr.simulation import Scenario, read_reports, simulate_dataset
from lsfqr.tuning import read_trace

SMALL = {
    "mesh": {"n_t": 3, "n_u_cells": 1},
    "basis": {"d": 2, "r": 1},
    "alpha": {"n_b": 3, "order": 2},
    "quantiles": {"count": 3, "range": [0.25, 0.75]},
}


@pytest.fixture
def workdir(tmp_path):
    data = simulate_dataset(Scenario(n=40, m=41, K=4), 5).dataset
    data.to_csv(tmp_path / "curves.csv", tmp_path / "scalars.csv", tmp_path / "response.csv")
    return tmp_path


def _config(dirpath, name="run.yaml", **sections):
    cfg = {
        **SMALL,
        "data": {"curves": "curves.csv", "scalars": "scalars.csv", "response": "response.csv"},
        "penalty": {"lambda": 1e-4, "lambda1": 1e-4, "lambda2": 0.02, "option": 1},
        "output": "out",
        "seed": 1,
    }
    cfg.update(sections)
    path = dirpath / name
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_fit_smoke(workdir):
    assert main(["fit", str(_config(workdir))]) == 0
    out = workdir / "out"
    for name in ("eta.csv", "gamma.csv", "active_set.csv", "beta_heatmap.csv", "diagnostics.json"):
        assert (out / name).is_file()
    diag = json.loads((out / "diagnostics.json").read_text())
    assert diag["stage"] == "refit" and diag["solver"]["converged"]
    gamma = read_coefficients(out / "gamma.csv")
    with open(out / "active_set.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6
    norms = np.linalg.norm(gamma.reshape(6, -1), axis=1)
    np.testing.assert_allclose([float(r["block_norm"]) for r in rows], norms, rtol=1e-15)
    for r, nrm in zip(rows, norms):
        if r["active"] == "0":
            assert nrm == 0.0
    with open(out / "beta_heatmap.csv") as fh:
        heat = list(csv.DictReader(fh))
    assert len(heat) == 201 * 81
    assert float(heat[0]["t"]) == 0.0 and float(heat[-1]["u"]) == 0.75


def test_fit_is_byte_identical(workdir):
    cfg = _config(workdir)
    assert main(["fit", str(cfg), "--out", str(workdir / "a")]) == 0
    assert main(["fit", str(cfg), "--out", str(workdir / "b")]) == 0
    for name in ("eta.csv", "gamma.csv", "active_set.csv", "beta_heatmap.csv"):
        assert (workdir / "a" / name).read_bytes() == (workdir / "b" / name).read_bytes()


def test_linear_c1_rejected(workdir, capsys):
    cfg = _config(workdir, basis={"d": 1, "r": 1})
    assert main(["fit", str(cfg)]) == 2
    assert "config error" in capsys.readouterr().err
    assert not (workdir / "out").exists()


@pytest.mark.parametrize("mutate,code", [
    (lambda c: c["data"].update(curves="missing.csv"), 2),
    (lambda c: c["penalty"].update(option=7), 2),
    (lambda c: c.update(solver={"method": "newton"}), 2),
    (lambda c: c["quantiles"].update(range=[0.5]), 2),
    (lambda c: c["mesh"].update(n_t="many"), 2),
])
def test_config_errors(workdir, mutate, code):
    path = _config(workdir)
    cfg = yaml.safe_load(path.read_text())
    mutate(cfg)
    path.write_text(yaml.safe_dump(cfg))
    assert main(["fit", str(path)]) == code


def test_missing_config_and_bad_yaml(tmp_path):
    assert main(["fit", str(tmp_path / "nope.yaml")]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("mesh: [unclosed\n")
    assert main(["fit", str(bad)]) == 2
    bad.write_text("- just\n- a list\n")
    assert main(["fit", str(bad)]) == 2


def test_data_error_exit(workdir, capsys):
    (workdir / "response.csv").write_text("y\n1.0\n2.0\n")
    assert main(["fit", str(_config(workdir))]) == 3
    assert "data error" in capsys.readouterr().err


def test_solver_failure_exit(workdir):
    cfg = _config(workdir, solver={"method": "admm", "max_iter": 2})
    assert main(["fit", str(cfg)]) == 4


def test_tune_3x3(workdir):
    tuning = {"folds": 4, "lambda": [1e-4], "lambda1": [1e-5, 1e-4, 1e-3],
              "lambda2_fractions": [0.1, 0.5, 1.0]}
    assert main(["tune", str(_config(workdir, tuning=tuning))]) == 0
    rows = read_trace(workdir / "out" / "trace.csv")
    means = [r for r in rows if r["stage"] == "sparse" and r["fold"] == "mean"]
    assert len(means) == 9
    assert sum(r["selected"] == "1" for r in means) == 1
    assert len([r for r in rows if r["stage"] == "initial"]) == 5
    diag = json.loads((workdir / "out" / "diagnostics.json").read_text())
    sel = next(r for r in means if r["selected"] == "1")
    assert float(sel["lam1"]) == diag["selected"]["lambda1"]
    assert float(sel["lam2"]) == diag["selected"]["lambda2"]


def test_tune_empty_grid(workdir):
    assert main(["tune", str(_config(workdir, tuning={"lambda": []}))]) == 2
    assert main(["tune", str(_config(workdir, tuning={"lambda": 0.1}))]) == 2


def test_single_candidate_tune_equals_fit(workdir):
    tuning = {"folds": 4, "lambda": [1e-4], "lambda1": [1e-4], "lambda2": [0.02]}
    cfg = _config(workdir, tuning=tuning)
    assert main(["tune", str(cfg), "--out", str(workdir / "t")]) == 0
    assert main(["fit", str(cfg), "--out", str(workdir / "f")]) == 0
    for name in ("eta.csv", "gamma.csv", "active_set.csv"):
        assert (workdir / "t" / name).read_bytes() == (workdir / "f" / name).read_bytes()


def test_tune_trace_deterministic(workdir):
    cfg = _config(workdir, tuning={"folds": 3, "lambda": [1e-4, 1e-2], "lambda2_fractions": [0.2, 1.0],
                                   "lambda1": [1e-4]})
    assert main(["tune", str(cfg), "--out", str(workdir / "a"), "--workers", "2"]) == 0
    assert main(["tune", str(cfg), "--out", str(workdir / "b")]) == 0
    for name in ("trace.csv", "gamma.csv", "eta.csv"):
        assert (workdir / "a" / name).read_bytes() == (workdir / "b" / name).read_bytes()


def test_simulate_round_trip(workdir):
    sim = {"scenario": {"n": 50, "m": 31}, "replicates": 2, "fit": False}
    assert main(["simulate", str(_config(workdir, simulation=sim)), "--seed", "7"]) == 0
    root = workdir / "out"
    d = root / "datasets" / "seed8"
    ds = load_dataset(d / "curves.csv", d / "scalars.csv", d / "response.csv")
    ref = simulate_dataset(Scenario(n=50, m=31), 8).dataset
    np.testing.assert_array_equal(ds.X, ref.X)
    np.testing.assert_array_equal(ds.y, ref.y)
    np.testing.assert_array_equal(ds.t_grid, ref.t_grid)
    back = Scenario.from_dict(yaml.safe_load((root / "scenario.yaml").read_text()))
    assert back == Scenario(n=50, m=31)


def test_simulate_twenty_replicates(workdir):
    sim = {"scenario": {"n": 30, "m": 21, "beta_loc": [], "beta_scale": []},
           "replicates": 20, "write_datasets": False}
    cfg = _config(workdir, simulation=sim, tuning={"folds": 3, "lambda": [1e-3], "lambda1": [1e-3],
                                                   "lambda2_fractions": [0.3, 1.0]})
    assert main(["simulate", str(cfg)]) == 0
    rows = read_reports(workdir / "out" / "reports.csv")
    assert len(rows) == 20
    assert len({r["seed"] for r in rows}) == 20
    # beta = 0 leaves no non-null node to mislabel
    assert np.mean([float(r["sparse_fpr"]) for r in rows]) <= 0.1


def test_export_mesh(workdir):
    cfg = _config(workdir, mesh={"n_t": 4, "n_u_cells": 2, "t_range": [0, 2]})
    assert main(["export-mesh", str(cfg)]) == 0
    tri = Triangulation.from_csv(workdir / "out")
    assert tri.M == 16
    assert tri.vertices[:, 0].max() == 2.0
