"""Command line entry points: ``fit``, ``tune``, ``simulate`` and ``export-mesh``.

Usage::

    python -m lsfqr fit config.yaml [--seed S] [--workers W] [--out DIR]

The config is YAML (JSON is accepted too).  Relative data paths resolve
against the config file's directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import traceback
import warnings
from pathlib import Path

import numpy as np
import yaml

from .design import ModelSetup, load_dataset
from .errors import ConfigError, ConvergenceError, DataError, LsfqrError
from .simulation import (
    Scenario,
    SplineSurface,
    replicate_seeds,
    run_replicate,
    simulate_dataset,
    write_reports,
)
from .solver import (
    Option,
    SolverSettings,
    adaptive_weights,
    fit_initial,
    fit_sparse,
    refit_active,
)
from .tuning import TuningPlan, tune

log = logging.getLogger("lsfqr")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_SOLVER = 0, 2, 3, 4
HEATMAP_SHAPE = (201, 81)


# -- config -------------------------------------------------------------------

def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: cannot parse config: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    cfg.setdefault("_base", str(path.parent.resolve()))
    return cfg


def _section(cfg, name) -> dict:
    sec = cfg.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"config section '{name}' must be a mapping")
    return sec


def _num(sec, key, default, kind=float, lo=None):
    val = sec.get(key, default)
    try:
        val = kind(val)
    except (TypeError, ValueError):
        raise ConfigError(f"'{key}' must be {kind.__name__}, got {val!r}") from None
    if lo is not None and val < lo:
        raise ConfigError(f"'{key}' must be >= {lo}, got {val}")
    return val


def setup_from_config(cfg) -> ModelSetup:
    mesh, basis, alpha, qs = (_section(cfg, k) for k in ("mesh", "basis", "alpha", "quantiles"))
    rng = qs.get("range", (0.05, 0.95))
    if not isinstance(rng, (list, tuple)) or len(rng) != 2:
        raise ConfigError("quantiles.range must be [lo, hi]")
    u_range = mesh.get("u_range")
    return ModelSetup(
        n_t=_num(mesh, "n_t", 10, int, 1),
        n_u_cells=_num(mesh, "n_u_cells", 2, int, 1),
        d=_num(basis, "d", 3, int, 0),
        r=_num(basis, "r", 1, int, -1),
        n_b=_num(alpha, "n_b", 8, int, 1),
        order=_num(alpha, "order", 4, int, 1),
        level_count=_num(qs, "count", 19, int, 1),
        level_range=(float(rng[0]), float(rng[1])),
        u_range=None if u_range is None else (float(u_range[0]), float(u_range[1])),
        n_sub=_num(mesh, "n_sub", 8, int, 1),
    )


def settings_from_config(cfg) -> SolverSettings:
    sec = _section(cfg, "solver")
    method = sec.get("method", "ipm")
    if method not in ("ipm", "admm"):
        raise ConfigError(f"solver.method must be 'ipm' or 'admm', got {method!r}")
    s = SolverSettings(method=method)
    if "tol" in sec:
        tol = _num(sec, "tol", None, float)
        if not 0 < tol < 1:
            raise ConfigError("solver.tol must lie in (0, 1)")
        s.ipm_tol = min(tol, s.ipm_loosest_tol)
        s.abs_tol = s.rel_tol = tol
    if "max_iter" in sec:
        s.max_iter = _num(sec, "max_iter", None, int, 1)
    return s


def plan_from_config(cfg) -> TuningPlan:
    sec = _section(cfg, "tuning")
    pen = _section(cfg, "penalty")
    kw = {}
    for key, field_ in (("lambda", "lam_grid"), ("lambda1", "lam1_grid"),
                        ("lambda2", "lam2_grid"), ("lambda2_fractions", "lam2_fractions")):
        if key in sec:
            vals = sec[key]
            if not isinstance(vals, (list, tuple)):
                raise ConfigError(f"tuning.{key} must be a list")
            kw[field_] = [float(v) for v in vals]
    return TuningPlan(
        k=_num(sec, "folds", 10, int, 2),
        seed=_num(cfg, "seed", 0, int),
        option=Option.parse(pen.get("option", 1)),
        a_w=_num(pen, "a_w", 1.0, float),
        workers=_num(cfg, "workers", 1, int, 1),
        **kw,
    )


def _data_path(cfg, key, required=True):
    sec = _section(cfg, "data")
    val = sec.get(key)
    if val is None:
        if required:
            raise ConfigError(f"data.{key} is required")
        return None
    p = Path(val)
    if not p.is_absolute():
        p = Path(cfg["_base"]) / p
    if not p.is_file():
        raise ConfigError(f"data.{key}: file not found: {p}")
    return p


def _out_dir(cfg) -> Path:
    out = cfg.get("output", "lsfqr_out")
    p = Path(out)
    if not p.is_absolute():
        p = Path(cfg["_base"]) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


# -- artifacts ------------------------------------------------------------------

def _fmt(v):
    return repr(float(v))


def write_eta(path, eta, n_cov, n_b):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["covariate", "basis", "value"])
        for c in range(n_cov):
            for k in range(n_b):
                w.writerow([c, k, _fmt(eta[c * n_b + k])])


def write_gamma(path, gamma, basis):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["triangle", "i", "j", "k", "value"])
        for g, (m, (i, j, k)) in zip(gamma, basis.index_map):
            w.writerow([m, i, j, k, _fmt(g)])


def read_coefficients(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([float(r["value"]) for r in csv.DictReader(fh)])


def write_active(path, fit, basis):
    norms = fit.block_norms(basis.n_local)
    active = set(int(j) for j in fit.active_set)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["triangle", "active", "block_norm"])
        for j, nrm in enumerate(norms):
            w.writerow([j, int(j in active), _fmt(nrm)])


def write_heatmap(path, surface, t_range, u_range, shape=HEATMAP_SHAPE):
    t = np.linspace(*t_range, shape[0])
    u = np.linspace(*u_range, shape[1])
    T, U = np.meshgrid(t, u, indexing="ij")
    V = surface(T, U)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "u", "value"])
        for a in range(shape[0]):
            for b in range(shape[1]):
                w.writerow([_fmt(T[a, b]), _fmt(U[a, b]), _fmt(V[a, b])])


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, (np.integer, int)) and not isinstance(x, bool):
        return int(x)
    return x


def write_diagnostics(path, report: dict):
    with open(path, "w") as fh:
        json.dump(_jsonable(report), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_fit(out: Path, fit, D, t_range, extra: dict):
    basis = D.space.basis
    write_eta(out / "eta.csv", fit.eta_hat, D.n_alpha // D.alpha.n_b, D.alpha.n_b)
    write_gamma(out / "gamma.csv", fit.gamma_hat, basis)
    write_active(out / "active_set.csv", fit, basis)
    write_heatmap(out / "beta_heatmap.csv", SplineSurface(basis, fit.gamma_hat), t_range, basis.tri.u_range)
    report = {
        "objective": fit.objective_value,
        "lambda1": fit.lam1,
        "lambda2": fit.lam2,
        "option": fit.option.value,
        "active_set": [int(j) for j in fit.active_set],
        "solver": {k: v for k, v in fit.diagnostics.items()},
    }
    report.update(extra)
    write_diagnostics(out / "diagnostics.json", report)


def _load_data(cfg):
    return load_dataset(_data_path(cfg, "curves"), _data_path(cfg, "scalars", required=False),
                        _data_path(cfg, "response"))


# -- commands -----------------------------------------------------------------------

def cmd_fit(cfg) -> Path:
    setup = setup_from_config(cfg)
    settings = settings_from_config(cfg)
    pen = _section(cfg, "penalty")
    lam = _num(pen, "lambda", 1e-4, float, 0.0)
    lam1 = _num(pen, "lambda1", lam, float, 0.0)
    lam2 = _num(pen, "lambda2", 0.0, float, 0.0)
    option = Option.parse(pen.get("option", 1))
    a_w = _num(pen, "a_w", 1.0, float)
    refit = bool(pen.get("refit", True))
    ds = _load_data(cfg)
    out = _out_dir(cfg)
    t_range = (ds.t_grid[0], ds.t_grid[-1])
    D = setup.assemble(ds)
    initial = fit_initial(D, lam, settings)
    extra = {"lambda": lam, "stage": "initial"}
    fit = initial
    if lam2 > 0:
        weights = adaptive_weights(initial, option, D, a_w)
        fit = fit_sparse(D, lam1, lam2, weights, option, settings)
        extra["stage"] = "sparse"
        if refit:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                active = fit.active_set
                fit = refit_active(D, lam1, active, settings)
            fit.active_set = np.asarray(active)
            fit.lam2 = lam2
            fit.option = option
            extra["stage"] = "refit"
    _write_fit(out, fit, D, t_range, extra)
    return out


def cmd_tune(cfg) -> Path:
    setup = setup_from_config(cfg)
    settings = settings_from_config(cfg)
    plan = plan_from_config(cfg)
    ds = _load_data(cfg)
    out = _out_dir(cfg)
    D = setup.assemble(ds)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = tune(D, plan, settings)
    res.final.lam2 = res.lam2
    res.final.option = plan.option
    res.trace.to_csv(out / "trace.csv")
    _write_fit(out, res.final, D, (ds.t_grid[0], ds.t_grid[-1]),
               {"lambda": res.lam, "stage": "refit", "selected": {"lambda": res.lam, "lambda1": res.lam1,
                                                                 "lambda2": res.lam2}})
    return out


def cmd_simulate(cfg) -> Path:
    sec = _section(cfg, "simulation")
    scen = Scenario.from_dict(sec.get("scenario") or {})
    replicates = _num(sec, "replicates", 1, int, 1)
    out = _out_dir(cfg)
    seeds = replicate_seeds(_num(cfg, "seed", 0, int), replicates)
    if sec.get("write_datasets", True):
        for s in seeds:
            data = simulate_dataset(scen, s)
            d = out / "datasets" / f"seed{s}"
            d.mkdir(parents=True, exist_ok=True)
            data.dataset.to_csv(d / "curves.csv", d / "scalars.csv", d / "response.csv")
    reports = []
    if sec.get("fit", True):
        setup = setup_from_config(cfg)
        settings = settings_from_config(cfg)
        plan = plan_from_config(cfg)
        for s in seeds:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                reps, _, _ = run_replicate(scen, setup, plan, s, settings, baseline=bool(sec.get("baseline", False)))
            reports.extend(reps)
            log.info("replicate seed=%d done", s)
        write_reports(reports, out / "reports.csv")
    with open(out / "scenario.yaml", "w") as fh:
        yaml.safe_dump(_jsonable(scen.to_dict()), fh, sort_keys=True)
    return out


def cmd_export_mesh(cfg) -> Path:
    setup = setup_from_config(cfg)
    mesh = _section(cfg, "mesh")
    t_range = mesh.get("t_range", (0.0, 1.0))
    out = _out_dir(cfg)
    setup.triangulation((float(t_range[0]), float(t_range[1]))).to_csv(out)
    return out


COMMANDS = {"fit": cmd_fit, "tune": cmd_tune, "simulate": cmd_simulate, "export-mesh": cmd_export_mesh}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lsfqr", description="Locally sparse simultaneous functional quantile regression")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("config", help="YAML or JSON run configuration")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--workers", type=int, help="override the worker count")
    ap.add_argument("--out", help="override the output directory")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _where(exc) -> str:
    tb = traceback.extract_tb(exc.__traceback__)
    if not tb:
        return ""
    fr = tb[-1]
    return f" [{os.path.basename(fr.filename)}:{fr.lineno}]"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.workers is not None:
            cfg["workers"] = args.workers
        if args.out is not None:
            cfg["output"] = str(Path(args.out).resolve())
        out = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}{_where(exc)}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}{_where(exc)}", file=sys.stderr)
        return EXIT_DATA
    except ConvergenceError as exc:
        print(f"solver did not converge: {exc}{_where(exc)}", file=sys.stderr)
        return EXIT_SOLVER
    except LsfqrError as exc:
        print(f"error: {exc}{_where(exc)}", file=sys.stderr)
        return EXIT_DATA
    print(f"wrote {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
