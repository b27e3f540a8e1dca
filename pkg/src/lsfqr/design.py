"""Data ingestion and assembly of the stacked quantile-regression design.

Row ``(i, r)`` of the design (ordered level-major, then subject) is
``[z_i' V(u_r), A_i(u_r)' Q]`` where ``V(u)`` repeats the B-spline row
``b(u)'`` once per scalar covariate and ``A_i(u)`` integrates the Bernstein
basis against curve ``i`` along the line at height ``u``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import BSpline

from .bernstein import BernsteinBasis, ConstraintSystem, restricted_null_space
from .errors import ConfigError, DataError, DomainError
from .mesh import Triangulation, build_rect_triangulation
from .penalties import PenaltyPack, build_penalties, reduce


@dataclass(frozen=True)
class FunctionalDataset:
    """Curves on a common grid, scalar design (intercept first) and responses."""

    t_grid: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t_grid, dtype=float)
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        Z = np.asarray(self.Z, dtype=float)
        y = np.asarray(self.y, dtype=float).ravel()
        if Z.ndim == 1:
            Z = Z[:, None]
        if t.ndim != 1 or len(t) < 2:
            raise DataError("t-grid needs at least two points")
        if np.any(np.diff(t) <= 0):
            raise DataError("t-grid must be strictly increasing")
        n = len(y)
        if n < 1:
            raise DataError("dataset has no subjects")
        if X.shape != (n, len(t)):
            raise DataError(f"curves have shape {X.shape}, expected ({n}, {len(t)})")
        if Z.shape[0] != n:
            raise DataError(f"scalar design has {Z.shape[0]} rows for {n} responses")
        for name, a in (("t-grid", t), ("curves", X), ("scalars", Z), ("response", y)):
            if not np.all(np.isfinite(a)):
                raise DataError(f"{name} contain missing or non-finite values")
        object.__setattr__(self, "t_grid", t)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        """Number of scalar covariates, intercept excluded."""
        return self.Z.shape[1] - 1

    def subset(self, idx) -> "FunctionalDataset":
        idx = np.asarray(idx)
        return FunctionalDataset(self.t_grid, self.X[idx], self.Z[idx], self.y[idx])

    def to_csv(self, curves_path, scalars_path, response_path):
        with open(curves_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([repr(float(t)) for t in self.t_grid])
            w.writerows([[repr(float(v)) for v in row] for row in self.X])
        with open(scalars_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"z{k + 1}" for k in range(self.p)])
            w.writerows([[repr(float(v)) for v in row[1:]] for row in self.Z])
        with open(response_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["y"])
            w.writerows([[repr(float(v))] for v in self.y])


def _read_numeric_csv(path, header: str):
    """Read a numeric CSV table.

    ``header`` is ``"numeric"`` (first row is data-like, returned separately),
    ``"optional"`` (first row skipped when it is not numeric) or ``"none"``.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    head = None
    if header == "numeric":
        if not rows:
            raise DataError(f"{path}: empty file")
        head, rows = rows[0], rows[1:]
    elif header == "optional" and rows:
        try:
            [float(c) for c in rows[0]]
        except ValueError:
            rows = rows[1:]
    out = []
    width = None
    for k, r in enumerate(rows):
        if width is None:
            width = len(r)
        elif len(r) != width:
            raise DataError(f"{path}: ragged row {k + 1} has {len(r)} cells, expected {width}")
        try:
            out.append([float(c) for c in r])
        except ValueError as exc:
            raise DataError(f"{path}: non-numeric cell in row {k + 1}: {exc}") from None
    if head is not None:
        try:
            head = [float(c) for c in head]
        except ValueError as exc:
            raise DataError(f"{path}: non-numeric t-grid header: {exc}") from None
        if out and len(head) != width:
            raise DataError(f"{path}: header has {len(head)} grid points, rows have {width}")
    arr = np.array(out, dtype=float).reshape(len(out), width or 0)
    return arr, head


def load_dataset(curves_path, scalars_path=None, response_path=None) -> FunctionalDataset:
    """Load curves, scalar covariates and responses from CSV.

    The curves file starts with a header row of sampling times followed by one
    row per subject.  The scalar file (optional, header allowed) has one row per
    subject; an intercept column is prepended.  The response file has one column.
    """
    X, t = _read_numeric_csv(curves_path, "numeric")
    n = X.shape[0]
    if scalars_path is not None:
        S, _ = _read_numeric_csv(scalars_path, "optional")
        if S.shape[0] == 0 and n > 0 and S.shape[1] == 0:
            S = np.zeros((n, 0))
    else:
        S = np.zeros((n, 0))
    if response_path is None:
        raise DataError("a response file is required")
    y, _ = _read_numeric_csv(response_path, "optional")
    if y.ndim != 2 or y.shape[1] != 1:
        raise DataError(f"{response_path}: response file must have exactly one column")
    if S.shape[0] != n or y.shape[0] != n:
        raise DataError(f"subject counts differ: curves {n}, scalars {S.shape[0]}, responses {y.shape[0]}")
    t = np.asarray(t)
    if np.any(np.diff(t) <= 0):
        raise DataError(f"{curves_path}: t-grid must be strictly increasing")
    Z = np.column_stack([np.ones(n), S])
    return FunctionalDataset(t, X, Z, y[:, 0])


@dataclass(frozen=True)
class QuantileGrid:
    levels: np.ndarray

    def __post_init__(self):
        lv = np.atleast_1d(np.asarray(self.levels, dtype=float))
        if lv.size == 0:
            raise ConfigError("quantile grid is empty")
        if np.any(lv <= 0) or np.any(lv >= 1):
            raise ConfigError("quantile levels must lie in (0, 1)")
        if np.any(np.diff(lv) <= 0):
            raise ConfigError("quantile levels must be strictly increasing")
        object.__setattr__(self, "levels", lv)

    @classmethod
    def uniform(cls, lo: float, hi: float, count: int) -> "QuantileGrid":
        if count == 1:
            return cls(np.array([0.5 * (lo + hi)]))
        return cls(np.linspace(lo, hi, int(count)))

    def __len__(self):
        return len(self.levels)


class BSplineBlock:
    """Clamped uniform B-splines ``b(u)`` of a given order on ``u_range``."""

    def __init__(self, u_range, n_b: int = 8, order: int = 4):
        if order < 1:
            raise ConfigError("B-spline order must be >= 1")
        if n_b < order:
            raise ConfigError(f"need n_b >= order, got n_b={n_b}, order={order}")
        self.u_range = (float(u_range[0]), float(u_range[1]))
        self.n_b = int(n_b)
        self.order = int(order)
        k = self.order - 1
        inner = np.linspace(*self.u_range, self.n_b - k + 1)
        self.knots = np.r_[[inner[0]] * k, inner, [inner[-1]] * k]

    def __call__(self, u) -> np.ndarray:
        """``(len(u), n_b)`` matrix of basis values."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        lo, hi = self.u_range
        if np.any(u < lo - 1e-12) or np.any(u > hi + 1e-12):
            raise DomainError(f"levels outside {self.u_range}")
        u = np.clip(u, lo, hi)
        return BSpline.design_matrix(u, self.knots, self.order - 1).toarray()

    def V(self, u, n_cov: int) -> np.ndarray:
        """Block-diagonal ``V(u)`` for a single level, shape ``(n_cov, n_cov * n_b)``."""
        return np.kron(np.eye(n_cov), self(u)[0])


def bspline_block(levels, n_b: int = 8, order: int = 4, u_range=None) -> BSplineBlock:
    lv = levels.levels if isinstance(levels, QuantileGrid) else np.asarray(levels, dtype=float)
    if u_range is None:
        u_range = (lv.min(), lv.max())
    return BSplineBlock(u_range, n_b, order)


def _line_breakpoints(tri: Triangulation, u: float) -> np.ndarray:
    """t-coordinates where triangle edges meet the horizontal line at ``u``."""
    V = tri.vertices
    out = []
    for a, b in tri.edges():
        (ta, ua), (tb, ub) = V[a], V[b]
        if ua == ub:
            if ua == u:
                out += [ta, tb]
        elif min(ua, ub) <= u <= max(ua, ub):
            out.append(ta + (u - ua) * (tb - ta) / (ub - ua))
    return np.array(out)


def assemble_A(dataset: FunctionalDataset, basis: BernsteinBasis, u: float, n_sub: int = 8) -> np.ndarray:
    """``(n, n_B)`` matrix of trapezoid approximations to ``int B_j(t, u) x_i(t) dt``.

    Breakpoints are the sampling times plus every edge crossing of the line,
    and each resulting interval is split into ``n_sub`` equal pieces.  Curves
    are linearly interpolated.  Each interval is integrated on the single
    triangle containing it, so basis discontinuities never fall inside a panel.
    """
    tri = basis.tri
    (t0, t1), (u0, u1) = tri.t_range, tri.u_range
    if not (u0 - 1e-12 <= u <= u1 + 1e-12):
        raise DomainError(f"level {u} outside {tri.u_range}")
    tg = dataset.t_grid
    if tg[0] > t0 + 1e-9 or tg[-1] < t1 - 1e-9:
        raise DataError(f"t-grid [{tg[0]}, {tg[-1]}] does not cover [{t0}, {t1}]")
    bps = np.concatenate([tg, _line_breakpoints(tri, u), [t0, t1]])
    bps = np.unique(np.clip(bps, t0, t1))
    keep = np.r_[True, np.diff(bps) > 1e-12 * (t1 - t0)]
    bps = bps[keep]
    a, b = bps[:-1], bps[1:]
    mids = np.column_stack([0.5 * (a + b), np.full(len(a), u)])
    owner, _ = tri.locate_many(mids)
    frac = np.linspace(0.0, 1.0, n_sub + 1)
    nodes = (a[:, None] + (b - a)[:, None] * frac[None, :]).ravel()
    wts = np.full(n_sub + 1, 1.0)
    wts[[0, -1]] = 0.5
    weights = (((b - a) / n_sub)[:, None] * wts[None, :]).ravel()
    ids = np.repeat(owner, n_sub + 1)
    pts = np.column_stack([nodes, np.full(len(nodes), u)])
    Bv = basis.eval(pts, triangle_ids=ids)
    Xi = np.empty((dataset.n, len(nodes)))
    for i in range(dataset.n):
        Xi[i] = np.interp(nodes, tg, dataset.X[i])
    return np.asarray((Bv.T.multiply(weights) @ Xi.T).T)


@dataclass(frozen=True)
class SplineSpace:
    """Bernstein basis with its smoothness constraints and penalty matrices."""

    basis: BernsteinBasis
    constraints: ConstraintSystem
    penalties: PenaltyPack

    @classmethod
    def build(cls, tri: Triangulation, d: int = 3, r: int = 1) -> "SplineSpace":
        basis = BernsteinBasis(tri, d, r)
        cs = basis.constraint_system()
        return cls(basis, cs, build_penalties(basis, cs.Q))

    @property
    def H(self):
        return self.constraints.H

    @property
    def Q(self):
        return self.constraints.Q


@dataclass(frozen=True, eq=False)
class DesignBundle:
    """Stacked regression rows for all ``(level, subject)`` pairs.

    ``Zb`` is the varying-coefficient block, ``A`` holds the raw integrated
    spline basis (before the null-space map), so a bundle can be re-expressed
    in any constrained basis ``Q`` via :meth:`with_Q`.
    """

    Zb: np.ndarray
    A: np.ndarray
    y: np.ndarray
    level: np.ndarray
    subject: np.ndarray
    levels: np.ndarray
    space: SplineSpace
    alpha: BSplineBlock
    Q: np.ndarray
    G_reduced: np.ndarray
    _W: np.ndarray = field(default=None, repr=False)

    @property
    def n_alpha(self) -> int:
        return self.Zb.shape[1]

    @property
    def q(self) -> int:
        return self.Q.shape[1]

    @property
    def n_rows(self) -> int:
        return len(self.y)

    @property
    def subjects(self) -> np.ndarray:
        return np.unique(self.subject)

    @property
    def W(self) -> np.ndarray:
        if self._W is None:
            object.__setattr__(self, "_W", np.hstack([self.Zb, self.A @ self.Q]))
        return self._W

    def with_Q(self, Q) -> "DesignBundle":
        Q = np.asarray(Q, dtype=float)
        return replace(self, Q=Q, G_reduced=reduce(self.space.penalties.G, Q), _W=None)

    def restrict_to(self, active_set) -> "DesignBundle":
        """Re-express the bundle with every triangle outside ``active_set`` fixed at zero."""
        basis = self.space.basis
        active = np.zeros(basis.tri.M, dtype=bool)
        active[np.asarray(sorted(active_set), dtype=np.intp)] = True
        zero_cols = np.flatnonzero(~active[basis.group_ids()])
        if active.all():
            return self.with_Q(self.space.Q)
        return self.with_Q(restricted_null_space(self.space.H, zero_cols))

    def subset(self, subjects) -> "DesignBundle":
        mask = np.isin(self.subject, np.asarray(subjects))
        W = None if self._W is None else self._W[mask]
        return replace(self, Zb=self.Zb[mask], A=self.A[mask], y=self.y[mask],
                       level=self.level[mask], subject=self.subject[mask], _W=W)

    def with_response(self, y) -> "DesignBundle":
        y = np.asarray(y, dtype=float)
        if y.shape != self.y.shape:
            raise DataError("response length mismatch")
        return replace(self, y=y)

    def predict(self, eta, gamma) -> np.ndarray:
        return self.Zb @ eta + self.A @ gamma


def assemble_design(dataset: FunctionalDataset, levels: QuantileGrid, space: SplineSpace,
                    Q=None, n_b: int = 8, order: int = 4, n_sub: int = 8) -> DesignBundle:
    """Stack the regression rows for every level (outer) and subject (inner)."""
    if not isinstance(levels, QuantileGrid):
        levels = QuantileGrid(levels)
    basis = space.basis
    alpha = BSplineBlock(basis.tri.u_range, n_b, order)
    lv = levels.levels
    n = dataset.n
    bu = alpha(lv)  # (n_u, n_b)
    Zb = np.concatenate([np.kron(dataset.Z, bu[r][None, :]) for r in range(len(lv))])
    A = np.concatenate([assemble_A(dataset, basis, u, n_sub) for u in lv])
    Q = space.Q if Q is None else np.asarray(Q, dtype=float)
    return DesignBundle(
        Zb=Zb,
        A=A,
        y=np.tile(dataset.y, len(lv)),
        level=np.repeat(lv, n),
        subject=np.tile(np.arange(n), len(lv)),
        levels=lv,
        space=space,
        alpha=alpha,
        Q=Q,
        G_reduced=reduce(space.penalties.G, Q),
    )


@dataclass(frozen=True)
class ModelSetup:
    """Mesh, basis and level choices shared by fitting, tuning and simulation.

    ``u_range`` defaults to the span of the quantile levels.
    """

    n_t: int = 10
    n_u_cells: int = 2
    d: int = 3
    r: int = 1
    n_b: int = 8
    order: int = 4
    level_count: int = 19
    level_range: tuple = (0.05, 0.95)
    u_range: tuple | None = None
    n_sub: int = 8

    def __post_init__(self):
        if self.r >= 0 and self.d < self.r + 1:
            raise ConfigError(f"C^{self.r} splines need degree d >= {self.r + 1}, got d={self.d}")
        if self.n_t < 1 or self.n_u_cells < 1:
            raise ConfigError("mesh cell counts must be >= 1")
        if self.level_count < 1:
            raise ConfigError("need at least one quantile level")
        if self.n_b < self.order or self.order < 1:
            raise ConfigError(f"need n_b >= order >= 1, got n_b={self.n_b}, order={self.order}")
        lo, hi = self.level_range
        if not 0 < lo <= hi < 1:
            raise ConfigError(f"level range {self.level_range} must lie inside (0, 1)")

    @property
    def levels(self) -> QuantileGrid:
        return QuantileGrid.uniform(*self.level_range, self.level_count)

    @property
    def domain_u(self) -> tuple:
        if self.u_range is not None:
            return tuple(float(v) for v in self.u_range)
        lo, hi = (float(v) for v in self.level_range)
        if lo == hi:
            # a single level still needs a band of positive height
            return (max(lo - 0.05, 1e-3), min(hi + 0.05, 1 - 1e-3))
        return (lo, hi)

    def triangulation(self, t_range) -> Triangulation:
        return build_rect_triangulation(t_range, self.domain_u, self.n_t, self.n_u_cells)

    def space(self, t_range) -> SplineSpace:
        return SplineSpace.build(self.triangulation(t_range), self.d, self.r)

    def assemble(self, dataset: FunctionalDataset, space: SplineSpace | None = None,
                 levels=None) -> DesignBundle:
        space = space or self.space((dataset.t_grid[0], dataset.t_grid[-1]))
        levels = self.levels if levels is None else levels
        return assemble_design(dataset, levels, space, n_b=self.n_b, order=self.order, n_sub=self.n_sub)
