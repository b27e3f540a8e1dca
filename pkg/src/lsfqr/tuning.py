"""Cross-validated choice of the roughness and sparsity penalties.

The protocol has two stages.  ``cv_initial`` picks the roughness weight of
the initial fit by K-fold CV.  ``cv_sparse`` then scans ``(lam1, lam2)``:
each pair is fit once on the full data to get an active set of triangles,
and its validation loss comes from refits restricted to that set.
"""

from __future__ import annotations

import csv
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .design import DesignBundle
from .errors import ConfigError, ConvergenceError, DataError
from .solver import (
    FitResult,
    Option,
    SolverSettings,
    adaptive_weights,
    check_loss,
    fit_initial,
    fit_sparse,
    lambda2_max,
    refit_active,
)

log = logging.getLogger(__name__)

DEFAULT_LAM_GRID = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1)
# sparsity grid as multiples of lambda2_max (all blocks vanish near 1)
DEFAULT_LAM2_FRACTIONS = (0.02, 0.05, 0.1, 0.2, 0.35, 0.5, 0.7, 1.0)
TIE_RTOL = 1e-12


def _grid(values, name):
    if values is None:
        return None
    arr = np.asarray(values, dtype=float).ravel()
    if arr.size == 0:
        raise ConfigError(f"{name} grid is empty")
    if np.any(~np.isfinite(arr)) or np.any(arr < 0):
        raise ConfigError(f"{name} grid must be finite and nonnegative")
    if np.any(np.diff(arr) <= 0):
        raise ConfigError(f"{name} grid must be strictly ascending")
    return tuple(float(v) for v in arr)


@dataclass
class TuningPlan:
    """Grids and fold settings.

    ``lam1_grid=None`` reuses ``lam_grid``.  ``lam2_grid=None`` means
    ``lam2_fractions`` times :func:`lambda2_max` of the data at hand.
    """

    lam_grid: tuple = DEFAULT_LAM_GRID
    lam1_grid: tuple | None = None
    lam2_grid: tuple | None = None
    lam2_fractions: tuple = DEFAULT_LAM2_FRACTIONS
    k: int = 10
    seed: int = 0
    option: Option = Option.COEF
    a_w: float = 1.0
    workers: int = 1

    def __post_init__(self):
        self.lam_grid = _grid(self.lam_grid, "lambda")
        self.lam1_grid = _grid(self.lam1_grid, "lambda1")
        self.lam2_grid = _grid(self.lam2_grid, "lambda2")
        self.lam2_fractions = _grid(self.lam2_fractions, "lambda2 fraction")
        self.option = Option.parse(self.option)
        if self.option is Option.INITIAL:
            raise ConfigError("tuning needs option 1 or 2")
        if int(self.k) < 2:
            raise ConfigError(f"need at least 2 folds, got {self.k}")
        self.k = int(self.k)
        if self.a_w <= 0:
            raise ConfigError("a_w must be positive")
        self.workers = max(1, int(self.workers))


@dataclass
class TuningTrace:
    """Per-fold validation losses plus one ``fold="mean"`` row per candidate."""

    rows: list = field(default_factory=list)
    lam: float | None = None
    lam1: float | None = None
    lam2: float | None = None
    active_sets: dict = field(default_factory=dict)

    COLUMNS = ("stage", "candidate", "lam", "lam1", "lam2", "fold", "loss", "active_size", "selected")

    def add(self, **row):
        self.rows.append({c: row.get(c, "") for c in self.COLUMNS})

    def stage_rows(self, stage, fold=None):
        return [r for r in self.rows if r["stage"] == stage and (fold is None or r["fold"] == fold)]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_trace(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def kfold_split(n: int, k: int, seed: int = 0) -> np.ndarray:
    """Fold label per index; sizes differ by at most one."""
    n, k = int(n), int(k)
    if k < 1 or k > n:
        raise ConfigError(f"cannot split {n} items into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=int)
    folds[perm] = np.arange(n) % k
    return folds


def _subject_folds(design: DesignBundle, plan: TuningPlan):
    subjects = design.subjects
    if plan.k > len(subjects):
        raise ConfigError(f"k={plan.k} folds exceeds {len(subjects)} subjects")
    labels = kfold_split(len(subjects), plan.k, plan.seed)
    return [(subjects[labels != f], subjects[labels == f]) for f in range(plan.k)]


def validation_loss(design: DesignBundle, fit: FitResult) -> float:
    """Mean check loss over all rows, every level weighted equally."""
    r = design.y - design.predict(fit.eta_hat, fit.gamma_hat)
    return float(np.mean(check_loss(r, design.level)))


def fold_fit(design: DesignBundle, train, fitter) -> FitResult:
    """Fit on the training subjects only; held-out rows are never passed on."""
    return fitter(design.subset(train))


# job functions live at module level so they pickle for worker processes

def _initial_job(args):
    design, train, test, lam, settings = args
    try:
        fit = fit_initial(design.subset(train), lam, settings)
    except (ConvergenceError, DataError) as exc:
        log.warning("initial fit lam=%g failed: %s", lam, exc)
        return np.nan
    return validation_loss(design.subset(test), fit)


def _refit_job(args):
    design, train, test, lam1, active, settings = args
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            fit = refit_active(design.subset(train), lam1, active, settings)
    except (ConvergenceError, DataError) as exc:
        log.warning("refit lam1=%g failed: %s", lam1, exc)
        return np.nan
    return validation_loss(design.subset(test), fit)


def _run(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


def _select(means: np.ndarray, order_keys) -> int:
    """Index of the minimal mean loss; near-ties go to the largest key."""
    ok = np.isfinite(means)
    if not ok.any():
        raise ConvergenceError("every tuning candidate failed")
    best = np.min(means[ok])
    tied = [i for i in np.flatnonzero(ok) if means[i] <= best + TIE_RTOL * max(abs(best), 1e-300)]
    return max(tied, key=lambda i: order_keys[i])


def cv_initial(design: DesignBundle, plan: TuningPlan, settings: SolverSettings | None = None,
               trace: TuningTrace | None = None):
    """K-fold CV over ``plan.lam_grid`` for the initial fit.  Returns ``(lam*, trace)``."""
    trace = trace or TuningTrace()
    folds = _subject_folds(design, plan)
    grid = plan.lam_grid
    jobs = [(design, tr, te, lam, settings) for lam in grid for tr, te in folds]
    losses = np.array(_run(_initial_job, jobs, plan.workers)).reshape(len(grid), plan.k)
    with np.errstate(invalid="ignore"):
        means = np.where(np.all(np.isfinite(losses), axis=1), losses.mean(axis=1), np.nan)
    pick = _select(means, grid)
    for c, lam in enumerate(grid):
        for f in range(plan.k):
            trace.add(stage="initial", candidate=c, lam=lam, fold=f, loss=float(losses[c, f]))
        trace.add(stage="initial", candidate=c, lam=lam, fold="mean", loss=float(means[c]),
                  selected=int(c == pick))
    trace.lam = grid[pick]
    return trace.lam, trace


def resolve_lam2_grid(design: DesignBundle, weights, plan: TuningPlan) -> tuple:
    if plan.lam2_grid is not None:
        return plan.lam2_grid
    top = lambda2_max(design, weights, plan.option)
    return tuple(float(f * top) for f in plan.lam2_fractions)


def cv_sparse(design: DesignBundle, weights, plan: TuningPlan, settings: SolverSettings | None = None,
              trace: TuningTrace | None = None, lam1_grid=None, lam2_grid=None):
    """Scan ``(lam1, lam2)`` with full-data active sets and per-fold refits.

    Returns ``(lam1*, lam2*, trace)``; ``trace.active_sets`` maps each pair to
    its active set.  Ties prefer the larger ``lam2``, then the larger ``lam1``.
    """
    trace = trace or TuningTrace()
    folds = _subject_folds(design, plan)
    g1 = _grid(lam1_grid, "lambda1") or plan.lam1_grid or plan.lam_grid
    g2 = _grid(lam2_grid, "lambda2") or resolve_lam2_grid(design, weights, plan)
    pairs = [(l1, l2) for l1 in g1 for l2 in g2]
    actives = {}
    for l1, l2 in pairs:
        try:
            fit = fit_sparse(design, l1, l2, weights, plan.option, settings)
            actives[(l1, l2)] = tuple(int(j) for j in fit.active_set)
        except ConvergenceError as exc:
            log.warning("sparse fit (%g, %g) failed: %s", l1, l2, exc)
            actives[(l1, l2)] = None
    # identical (lam1, active set) pairs give identical refits
    keys = sorted({(l1, a) for (l1, _), a in actives.items() if a is not None})
    jobs = [(design, tr, te, l1, list(a), settings) for l1, a in keys for tr, te in folds]
    flat = _run(_refit_job, jobs, plan.workers)
    per_key = {key: np.array(flat[i * plan.k:(i + 1) * plan.k]) for i, key in enumerate(keys)}
    losses = np.array([per_key[(l1, a)] if a is not None else np.full(plan.k, np.nan)
                       for (l1, _), a in actives.items()])
    with np.errstate(invalid="ignore"):
        means = np.where(np.all(np.isfinite(losses), axis=1), losses.mean(axis=1), np.nan)
    pick = _select(means, [(l2, l1) for l1, l2 in pairs])
    for c, (l1, l2) in enumerate(pairs):
        a = actives[(l1, l2)]
        size = len(a) if a is not None else -1
        for f in range(plan.k):
            trace.add(stage="sparse", candidate=c, lam1=l1, lam2=l2, fold=f,
                      loss=float(losses[c, f]), active_size=size)
        trace.add(stage="sparse", candidate=c, lam1=l1, lam2=l2, fold="mean", loss=float(means[c]),
                  active_size=size, selected=int(c == pick))
    trace.active_sets.update(actives)
    trace.lam1, trace.lam2 = pairs[pick]
    return trace.lam1, trace.lam2, trace


@dataclass
class TuningResult:
    lam: float
    lam1: float
    lam2: float
    initial: FitResult
    weights: np.ndarray
    sparse: FitResult
    final: FitResult
    trace: TuningTrace


def tune(design: DesignBundle, plan: TuningPlan | None = None,
         settings: SolverSettings | None = None) -> TuningResult:
    """Full two-stage protocol.

    ``final`` is the full-data refit on the selected active set with the
    selected ``lam1``, i.e. the same estimator whose validation loss chose
    the pair; ``sparse`` keeps the penalized fit itself.
    """
    plan = plan or TuningPlan()
    trace = TuningTrace()
    lam, _ = cv_initial(design, plan, settings, trace)
    initial = fit_initial(design, lam, settings)
    weights = adaptive_weights(initial, plan.option, design, plan.a_w)
    lam1, lam2, _ = cv_sparse(design, weights, plan, settings, trace)
    sparse = fit_sparse(design, lam1, lam2, weights, plan.option, settings)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        final = refit_active(design, lam1, sparse.active_set, settings)
    # carry the sparse fit's zero pattern explicitly
    final.active_set = np.asarray(sparse.active_set)
    return TuningResult(lam, lam1, lam2, initial, weights, sparse, final, trace)
