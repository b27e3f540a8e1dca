"""Synthetic data with a known, locally sparse slope surface, and recovery scores.

Responses follow a location-scale model

    Y = z' alpha* + int b_loc X + (1 + int b_scale X) * eps,   eps ~ F,

so the conditional u-quantile has slope ``b_loc(t) + b_scale(t) F^{-1}(u)``
and intercept ``alpha*_0 + F^{-1}(u)``.  Slopes are sums of compactly
supported bumps, which gives exact null regions.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats
from scipy.integrate import trapezoid

from .bernstein import BernsteinBasis
from .design import FunctionalDataset, ModelSetup, QuantileGrid, assemble_design
from .errors import ConfigError, DataError
from .solver import SolverSettings, fit_initial
from .tuning import TuningPlan, cv_initial, tune

log = logging.getLogger(__name__)

# scoring grid; 101 x 41 leaves ~1e-2 relative trapezoid error on rough cubic splines
SCORE_NT, SCORE_NU = 401, 161


@dataclass(frozen=True)
class Bump:
    """``height * (1 - ((t - center) / half_width)^2)^power`` on the support, 0 outside."""

    center: float
    half_width: float
    height: float = 1.0
    power: int = 2

    def __call__(self, t):
        x = (np.asarray(t, dtype=float) - self.center) / self.half_width
        return np.where(np.abs(x) < 1, self.height * np.clip(1 - x * x, 0, None) ** self.power, 0.0)


def _bumps(spec) -> tuple:
    if spec is None:
        return ()
    out = []
    for b in spec:
        if isinstance(b, Bump):
            out.append(b)
        elif isinstance(b, dict):
            out.append(Bump(**b))
        else:
            out.append(Bump(*b))
    for b in out:
        if b.half_width <= 0:
            raise ConfigError("bump half_width must be positive")
    return tuple(out)


def _profile(bumps, t):
    t = np.asarray(t, dtype=float)
    return sum((b(t) for b in bumps), np.zeros_like(t))


@dataclass
class Scenario:
    n: int = 400
    m: int = 101
    K: int = 10
    t_range: tuple = (0.0, 1.0)
    beta_loc: tuple = (Bump(0.3, 0.2, 3.0),)
    beta_scale: tuple = (Bump(0.3, 0.2, 1.0),)
    alpha_star: tuple = (1.0, 0.5)
    error: str = "normal"
    df: float = 5.0
    noise_scale: float = 0.5
    scale_floor: float = 0.05
    resample_budget: int = 50
    seed: int = 0

    def __post_init__(self):
        self.beta_loc = _bumps(self.beta_loc)
        self.beta_scale = _bumps(self.beta_scale)
        self.alpha_star = tuple(float(a) for a in self.alpha_star)
        self.t_range = (float(self.t_range[0]), float(self.t_range[1]))
        if self.n < 2 or self.m < 2:
            raise ConfigError("scenario needs n >= 2 subjects and m >= 2 grid points")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if not self.t_range[0] < self.t_range[1]:
            raise ConfigError(f"bad t_range {self.t_range}")
        if len(self.alpha_star) < 1:
            raise ConfigError("alpha_star needs at least the intercept")
        if self.error not in ("normal", "t"):
            raise ConfigError(f"error must be 'normal' or 't', got {self.error!r}")
        if self.noise_scale <= 0:
            raise ConfigError("noise_scale must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["beta_loc"] = [asdict(b) for b in self.beta_loc]
        out["beta_scale"] = [asdict(b) for b in self.beta_scale]
        return out

    @property
    def t_grid(self) -> np.ndarray:
        return np.linspace(*self.t_range, self.m)

    def error_ppf(self, u):
        q = stats.norm.ppf(u) if self.error == "normal" else stats.t.ppf(u, self.df)
        return self.noise_scale * q

    def draw_errors(self, rng, size):
        e = rng.standard_normal(size) if self.error == "normal" else rng.standard_t(self.df, size)
        return self.noise_scale * e


@dataclass(frozen=True)
class TrueModel:
    """Closed-form quantile coefficients implied by a scenario."""

    scenario: Scenario

    def beta(self, t, u):
        t, u = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(u, dtype=float))
        sc = self.scenario
        return _profile(sc.beta_loc, t) + _profile(sc.beta_scale, t) * sc.error_ppf(u)

    __call__ = beta

    def alpha(self, u):
        a = np.array(self.scenario.alpha_star, dtype=float)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        out = np.tile(a, (len(u), 1))
        out[:, 0] += self.scenario.error_ppf(u)
        return out

    def null_in_t(self, t):
        sc = self.scenario
        return (_profile(sc.beta_loc, t) == 0) & (_profile(sc.beta_scale, t) == 0)


@dataclass
class SimulatedData:
    dataset: FunctionalDataset
    truth: TrueModel
    n_resampled: int
    seed: int


def cosine_basis(t, K: int, t_range=(0.0, 1.0)) -> np.ndarray:
    """Orthonormal cosines on ``t_range``, shape ``(K, len(t))``.

    ``phi_1 = 1/sqrt(T)`` and ``phi_k = sqrt(2/T) cos((k - 1) pi (t - t0) / T)``.
    The constant comes first on purpose: without it every curve integrates
    to zero and a slope that is constant in ``t`` cannot be identified.
    """
    t0, t1 = t_range
    T = t1 - t0
    k = np.arange(K)
    out = np.sqrt(2.0 / T) * np.cos(np.pi * np.outer(k, (np.asarray(t) - t0) / T))
    out[0] /= np.sqrt(2.0)
    return out


def gen_curves(scenario: Scenario, rng=None, scores=None) -> np.ndarray:
    """``n x m`` curves from a truncated Karhunen-Loeve expansion with score variances ``k^-2``."""
    sc = scenario
    phi = cosine_basis(sc.t_grid, sc.K, sc.t_range)
    if scores is None:
        rng = np.random.default_rng(sc.seed) if rng is None else rng
        scores = rng.standard_normal((sc.n, sc.K)) / np.arange(1, sc.K + 1)
    scores = np.asarray(scores, dtype=float)
    if scores.ndim == 1:
        scores = np.tile(scores, (sc.n, 1))
    return scores @ phi


def _integrate(f, X, t):
    return trapezoid(X * f[None, :], t, axis=1)


def gen_response(scenario: Scenario, curves, rng=None, Z=None):
    """Responses for given curves.  Returns ``(y, Z, truth)``; ``Z`` has a leading ones column.

    Raises DataError when a curve makes the scale factor fall below
    ``scenario.scale_floor``; :func:`simulate_dataset` resamples those first.
    """
    sc = scenario
    rng = np.random.default_rng(sc.seed) if rng is None else rng
    X = np.asarray(curves, dtype=float)
    t = sc.t_grid
    scale = 1.0 + _integrate(_profile(sc.beta_scale, t), X, t)
    if np.any(scale < sc.scale_floor):
        raise DataError(f"{int(np.sum(scale < sc.scale_floor))} curves violate the scale positivity floor")
    n = X.shape[0]
    p = len(sc.alpha_star)
    if Z is None:
        Z = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    loc = Z @ np.array(sc.alpha_star) + _integrate(_profile(sc.beta_loc, t), X, t)
    y = loc + scale * sc.draw_errors(rng, n)
    return y, Z, TrueModel(sc)


def simulate_dataset(scenario: Scenario, seed: int | None = None) -> SimulatedData:
    sc = scenario
    seed = sc.seed if seed is None else int(seed)
    rng = np.random.default_rng(seed)
    X = gen_curves(sc, rng)
    t = sc.t_grid
    bs = _profile(sc.beta_scale, t)
    resampled = 0
    for _ in range(sc.resample_budget):
        bad = np.flatnonzero(1.0 + _integrate(bs, X, t) < sc.scale_floor)
        if bad.size == 0:
            break
        resampled += bad.size
        sub = Scenario.from_dict({**sc.to_dict(), "n": max(len(bad), 2)})
        X[bad] = gen_curves(sub, rng)[: len(bad)]
    if resampled:
        log.info("resampled %d curves for scale positivity", resampled)
    y, Z, truth = gen_response(sc, X, rng)
    ds = FunctionalDataset(t, X, Z, y)
    return SimulatedData(ds, truth, resampled, seed)


# -- scoring ----------------------------------------------------------------

def _grid(t_range, u_range, nt, nu):
    t = np.linspace(*t_range, nt)
    u = np.linspace(*u_range, nu)
    return t, u, *np.meshgrid(t, u, indexing="ij")


def ise(beta_hat, beta_true, t_range, u_range, nt: int = SCORE_NT, nu: int = SCORE_NU) -> float:
    """Tensor trapezoid approximation of the integrated squared error over the rectangle."""
    if nt < 2 or nu < 2:
        raise ConfigError("ise needs at least two nodes per direction")
    t, u, T, U = _grid(t_range, u_range, nt, nu)
    sq = (np.asarray(beta_hat(T, U)) - np.asarray(beta_true(T, U))) ** 2
    return float(trapezoid(trapezoid(sq, u, axis=1), t))


def sparsity_confusion(beta_hat, beta_true, t_range, u_range, tol: float | None = None,
                       nt: int = SCORE_NT, nu: int = SCORE_NU) -> tuple[float, float]:
    """Null-region ``(TPR, FPR)`` on a grid.

    A node is null when ``|value| <= tol`` (default ``1e-3 * max |beta_true|``).
    TPR is the share of true-null nodes estimated null and FPR the share of
    non-null nodes estimated null.  An empty reference class gives TPR 1 or
    FPR 0.
    """
    _, _, T, U = _grid(t_range, u_range, nt, nu)
    bt = np.asarray(beta_true(T, U))
    bh = np.asarray(beta_hat(T, U))
    if tol is None:
        tol = 1e-3 * float(np.max(np.abs(bt)))
    elif tol <= 0:
        raise ConfigError("tol must be positive")
    true_null = np.abs(bt) <= tol
    est_null = np.abs(bh) <= tol
    tpr = float(np.mean(est_null[true_null])) if true_null.any() else 1.0
    fpr = float(np.mean(est_null[~true_null])) if (~true_null).any() else 0.0
    return tpr, fpr


class SplineSurface:
    """Vectorized evaluator ``(t, u) -> s(t, u)`` of a spline coefficient vector."""

    def __init__(self, basis: BernsteinBasis, gamma):
        self.basis = basis
        self.gamma = np.asarray(gamma, dtype=float)

    def __call__(self, t, u):
        t, u = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(u, dtype=float))
        pts = np.column_stack([t.ravel(), u.ravel()])
        return self.basis.eval_spline(self.gamma, pts).reshape(t.shape)


class StitchedSurface:
    """Per-level slope curves ``f_r(t)`` joined by linear interpolation in ``u``."""

    def __init__(self, levels, curves):
        self.levels = np.asarray(levels, dtype=float)
        self.curves = list(curves)

    def __call__(self, t, u):
        t, u = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(u, dtype=float))
        # curves depend on t only; evaluate once per distinct t
        tu, inv = np.unique(t, return_inverse=True)
        vals = np.stack([np.asarray(c(tu))[inv].reshape(t.shape) for c in self.curves])
        if len(self.levels) == 1:
            return vals[0]
        uc = np.clip(u, self.levels[0], self.levels[-1])
        k = np.clip(np.searchsorted(self.levels, uc, side="right") - 1, 0, len(self.levels) - 2)
        w = (uc - self.levels[k]) / (self.levels[k + 1] - self.levels[k])
        lo = np.take_along_axis(vals, k[None], 0)[0]
        hi = np.take_along_axis(vals, (k + 1)[None], 0)[0]
        return (1 - w) * lo + w * hi


@dataclass
class RecoveryReport:
    estimator: str
    seed: int
    n: int
    ise: float
    tpr: float
    fpr: float
    ise_by_level: list = field(default_factory=list)

    def row(self) -> dict:
        out = {k: getattr(self, k) for k in ("estimator", "seed", "n", "ise", "tpr", "fpr")}
        for r, v in enumerate(self.ise_by_level):
            out[f"ise_level{r}"] = v
        return out


def score(estimator: str, beta_hat, truth: TrueModel, levels, u_range, seed: int, n: int,
          nt: int = SCORE_NT, nu: int = SCORE_NU) -> RecoveryReport:
    sc = truth.scenario
    tr = sc.t_range
    total = ise(beta_hat, truth.beta, tr, u_range, nt, nu)
    tpr, fpr = sparsity_confusion(beta_hat, truth.beta, tr, u_range, nt=nt, nu=nu)
    t = np.linspace(*tr, nt)
    slices = [float(trapezoid((beta_hat(t, np.full_like(t, u)) - truth.beta(t, u)) ** 2, t)) for u in levels]
    return RecoveryReport(estimator, int(seed), int(n), total, tpr, fpr, slices)


def per_quantile_baseline(dataset: FunctionalDataset, setup: ModelSetup, plan: TuningPlan,
                          settings: SolverSettings | None = None, space=None) -> StitchedSurface:
    """One fit per level (single-level design, CV-tuned roughness), stitched in ``u``.

    Each single-level fit only identifies its slope along ``u = u_r``; that
    curve is kept and neighbouring levels are joined linearly.
    """
    space = space or setup.space((dataset.t_grid[0], dataset.t_grid[-1]))
    curves = []
    for u in setup.levels.levels:
        D = assemble_design(dataset, QuantileGrid([u]), space, n_b=1, order=1, n_sub=setup.n_sub)
        lam, _ = cv_initial(D, plan, settings)
        fit = fit_initial(D, lam, settings)
        surf = SplineSurface(space.basis, fit.gamma_hat)
        curves.append(lambda t, s=surf, u=u: s(t, np.full_like(np.asarray(t, dtype=float), u)))
    return StitchedSurface(setup.levels.levels, curves)


def run_replicate(scenario: Scenario, setup: ModelSetup, plan: TuningPlan, seed: int,
                  settings: SolverSettings | None = None, baseline: bool = False,
                  nt: int = SCORE_NT, nu: int = SCORE_NU):
    """Simulate, tune and score one replicate.  Returns ``(reports, tuning_result, data)``."""
    data = simulate_dataset(scenario, seed)
    ds = data.dataset
    space = setup.space(scenario.t_range)
    D = setup.assemble(ds, space)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = tune(D, plan, settings)
    lv = setup.levels.levels
    u_range = setup.domain_u
    reports = [
        score("sparse", SplineSurface(space.basis, res.final.gamma_hat), data.truth, lv, u_range, seed, ds.n, nt, nu),
        score("initial", SplineSurface(space.basis, res.initial.gamma_hat), data.truth, lv, u_range, seed, ds.n, nt, nu),
    ]
    if baseline:
        base = per_quantile_baseline(ds, setup, plan, settings, space)
        reports.append(score("per_quantile", base, data.truth, lv, u_range, seed, ds.n, nt, nu))
    return reports, res, data


def replicate_seeds(base_seed: int, replicates: int) -> list[int]:
    if replicates < 1:
        raise ConfigError("need at least one replicate")
    return [int(base_seed) + r for r in range(int(replicates))]


def write_reports(reports, path):
    """One row per replicate seed; estimator metrics become prefixed columns."""
    by_seed: dict = {}
    for r in reports:
        row = by_seed.setdefault(r.seed, {"seed": r.seed, "n": r.n})
        for k, v in r.row().items():
            if k not in ("estimator", "seed", "n"):
                row[f"{r.estimator}_{k}"] = v
    rows = [by_seed[s] for s in sorted(by_seed)]
    cols = list(dict.fromkeys(k for row in rows for k in row))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_reports(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
