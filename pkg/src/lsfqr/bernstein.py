"""Bernstein polynomial splines over a triangulation.

Every basis function lives on a single triangle.  Smoothness across interior
edges is imposed afterwards through linear constraints ``H @ gamma = 0`` whose
null space is parameterized by an orthonormal matrix ``Q``.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from math import factorial

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import ConfigError, DataError
from .mesh import Triangulation


def multi_indices(d: int) -> np.ndarray:
    """All ``(i, j, k)`` with ``i + j + k = d``, ``i`` then ``j`` descending."""
    return np.array(
        [(i, j, d - i - j) for i in range(d, -1, -1) for j in range(d - i, -1, -1)],
        dtype=int,
    ).reshape(-1, 3)


def _index_lookup(d: int) -> dict[tuple[int, int, int], int]:
    return {tuple(mi): k for k, mi in enumerate(multi_indices(d).tolist())}


def bernstein_values(bary: np.ndarray, d: int) -> np.ndarray:
    """Degree-``d`` Bernstein polynomials at barycentric points, shape ``(P, n_loc)``."""
    bary = np.atleast_2d(bary)
    mi = multi_indices(d)
    coef = np.array([factorial(d) / (factorial(i) * factorial(j) * factorial(k)) for i, j, k in mi])
    powers = [bary[:, c, None] ** np.arange(d + 1)[None, :] for c in range(3)]
    return coef * powers[0][:, mi[:, 0]] * powers[1][:, mi[:, 1]] * powers[2][:, mi[:, 2]]


@dataclass(frozen=True)
class ConstraintSystem:
    H: np.ndarray
    Q: np.ndarray
    rank: int

    @property
    def q(self) -> int:
        return self.Q.shape[1]


class BernsteinBasis:
    """Degree-``d`` Bernstein basis on every triangle of ``tri``.

    Column ``m * n_local + k`` is the ``k``-th basis polynomial (multi-index
    ``multi_indices(d)[k]``, exponents on the triangle's vertices in stored
    order) of triangle ``m``.
    """

    def __init__(self, tri: Triangulation, d: int = 3, r: int = 1):
        if d < 0 or r < -1:
            raise ConfigError(f"invalid degree/smoothness d={d}, r={r}")
        self.tri = tri
        self.d = int(d)
        self.r = int(r)
        self.local_indices = multi_indices(self.d)
        self.n_local = len(self.local_indices)
        self.n_basis = self.n_local * tri.M

    def __repr__(self):
        return f"BernsteinBasis(M={self.tri.M}, d={self.d}, r={self.r}, n_B={self.n_basis})"

    @property
    def index_map(self) -> list[tuple[int, tuple[int, int, int]]]:
        return [
            (m, tuple(mi))
            for m in range(self.tri.M)
            for mi in self.local_indices.tolist()
        ]

    def block(self, m: int) -> slice:
        """Columns of the basis functions supported on triangle ``m``."""
        return slice(m * self.n_local, (m + 1) * self.n_local)

    def group_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.tri.M), self.n_local)

    def domain_points(self, m: int) -> np.ndarray:
        v = self.tri.vertices[self.tri.triangles[m]]
        if self.d == 0:
            return v.mean(axis=0, keepdims=True)
        return self.local_indices @ v / self.d

    # -- evaluation -------------------------------------------------------

    def local_eval(self, m: int, bary: np.ndarray, deriv=(0, 0)) -> np.ndarray:
        """Derivatives of triangle ``m``'s basis at barycentric points, ``(P, n_local)``.

        Uses ``D_v B^d_a = d * sum_k (grad b_k . v) B^{d-1}_{a - e_k}``, applied
        once per requested derivative direction.
        """
        d1, d2 = (int(x) for x in deriv)
        order = d1 + d2
        bary = np.atleast_2d(bary)
        if order == 0:
            return bernstein_values(bary, self.d)
        out = np.zeros((len(bary), self.n_local))
        if order > self.d:
            return out
        lower = bernstein_values(bary, self.d - order)
        lookup = _index_lookup(self.d - order)
        g = self.tri.bary_gradients[m]  # (3, 2): d b_k / d(t, u)
        dirs = [g[:, 0]] * d1 + [g[:, 1]] * d2
        scale = factorial(self.d) / factorial(self.d - order)
        for ks in itertools.product(range(3), repeat=order):
            w = scale * np.prod([dirs[l][k] for l, k in enumerate(ks)])
            if w == 0.0:
                continue
            shift = np.bincount(ks, minlength=3)
            for col, mi in enumerate(self.local_indices):
                src = lookup.get(tuple(mi - shift))
                if src is not None:
                    out[:, col] += w * lower[:, src]
        return out

    def eval(self, points, deriv=(0, 0), triangle_ids=None) -> sp.csr_matrix:
        """Sparse ``(P, n_B)`` matrix of basis derivatives ``d^{d1}_t d^{d2}_u B_j``.

        ``triangle_ids`` forces the triangle each point is evaluated on
        (used by quadrature that must stay on one side of an edge).
        """
        d1, d2 = deriv
        if d1 < 0 or d2 < 0 or d1 + d2 > self.d:
            raise ConfigError(f"derivative order {deriv} exceeds degree {self.d}")
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if triangle_ids is None:
            ids, bary = self.tri.locate_many(pts)
        else:
            ids = np.broadcast_to(np.asarray(triangle_ids, dtype=np.intp), (len(pts),))
            bary = self.tri.barycentric(pts, ids)
        rows, cols, vals = [], [], []
        for m in np.unique(ids):
            sel = np.flatnonzero(ids == m)
            v = self.local_eval(m, bary[sel], deriv)
            rows.append(np.repeat(sel, self.n_local))
            cols.append(np.tile(np.arange(self.block(m).start, self.block(m).stop), len(sel)))
            vals.append(v.ravel())
        if not rows:
            return sp.csr_matrix((len(pts), self.n_basis))
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(len(pts), self.n_basis),
        )

    def eval_spline(self, gamma, points, deriv=(0, 0)) -> np.ndarray:
        gamma = np.asarray(gamma, dtype=float)
        if gamma.shape != (self.n_basis,):
            raise DataError(f"coefficient vector has shape {gamma.shape}, expected ({self.n_basis},)")
        return self.eval(points, deriv) @ gamma

    def interpolate(self, f) -> np.ndarray:
        """Coefficients reproducing ``f(t, u)`` at every triangle's domain points.

        Polynomials of degree ``<= d`` are reproduced exactly and yield a
        globally smooth spline.
        """
        gamma = np.empty(self.n_basis)
        lattice = self.local_indices / max(self.d, 1)
        V = bernstein_values(lattice if self.d else np.full((1, 3), 1 / 3), self.d)
        for m in range(self.tri.M):
            p = self.domain_points(m)
            gamma[self.block(m)] = np.linalg.solve(V, np.asarray(f(p[:, 0], p[:, 1]), dtype=float))
        return gamma

    # -- smoothness --------------------------------------------------------

    def smoothness_constraints(self) -> np.ndarray:
        """Constraint matrix ``H`` for C^r continuity across interior edges.

        For triangles ``T1 = <P, A, B>`` and ``T2 = <P', A, B>`` sharing edge
        ``AB``, with ``(b_P, b_A, b_B)`` the coordinates of ``P'`` relative to
        ``T1``, the conditions are, for ``n = 0..r`` and ``i + j = d - n``::

            c2[n, i, j] = sum_{a+b+c=n} c1[a, i+b, j+c] * B^n_{abc}(b_P, b_A, b_B)

        where exponents are listed on ``(P', A, B)`` and ``(P, A, B)``.
        """
        d, r = self.d, self.r
        if r >= d:
            raise ConfigError(f"smoothness r={r} requires degree d >= r+1, got d={d}")
        if r < 0:
            return np.zeros((0, self.n_basis))
        tri = self.tri
        lookup = _index_lookup(d)
        rows = []
        for (a, b), t1, t2 in tri.interior_edges():
            v1 = tri.triangles[t1].tolist()
            v2 = tri.triangles[t2].tolist()
            p1 = next(v for v in v1 if v not in (a, b))
            p2 = next(v for v in v2 if v not in (a, b))
            bp = tri.barycentric(tri.vertices[p2], [t1])[0]
            w1 = (bp[v1.index(p1)], bp[v1.index(a)], bp[v1.index(b)])

            def col(t, verts, exps):
                e = [0, 0, 0]
                for v, x in zip(verts, exps):
                    e[tri.triangles[t].tolist().index(v)] = x
                return self.block(t).start + lookup[tuple(e)]

            for n in range(r + 1):
                sub = multi_indices(n)
                bn = bernstein_values(np.array([w1]), n)[0]
                for i in range(d - n, -1, -1):
                    j = d - n - i
                    row = np.zeros(self.n_basis)
                    row[col(t2, (p2, a, b), (n, i, j))] += 1.0
                    for (x, y, z), c in zip(sub.tolist(), bn):
                        row[col(t1, (p1, a, b), (x, i + y, j + z))] -= c
                    rows.append(row)
        return np.array(rows).reshape(-1, self.n_basis)

    def constraint_system(self, rtol: float = 1e-10) -> ConstraintSystem:
        H = self.smoothness_constraints()
        Q, rank = null_space(H, rtol=rtol, return_rank=True)
        return ConstraintSystem(H=H, Q=Q, rank=rank)


def null_space(H, rtol: float = 1e-10, return_rank: bool = False):
    """Orthonormal basis of ``{x : H x = 0}`` from a pivoted QR of ``H.T``.

    Rank is the number of ``|R_kk|`` above ``rtol * ||H||_F``.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    n = H.shape[1]
    if H.shape[0] == 0 or not np.any(H):
        Q = np.eye(n)
        return (Q, 0) if return_rank else Q
    Qf, R, _ = scipy.linalg.qr(H.T, pivoting=True, mode="full")
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > rtol * np.linalg.norm(H)))
    Q = np.ascontiguousarray(Qf[:, rank:])
    return (Q, rank) if return_rank else Q


def restricted_null_space(H, zero_columns, rtol: float = 1e-10) -> np.ndarray:
    """Null space of ``H`` stacked with selector rows fixing ``zero_columns`` at 0.

    Equivalent to appending the 0/1 rows to ``H``; computed by restricting
    ``H`` to the free columns so the fixed coefficients are exact zeros.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    n = H.shape[1]
    free = np.ones(n, dtype=bool)
    free[np.asarray(zero_columns, dtype=np.intp)] = False
    Q = np.zeros((n, 0))
    if free.any():
        Hf = H[:, free]
        Hf = Hf[np.any(Hf != 0, axis=1)] if Hf.size else Hf.reshape(0, int(free.sum()))
        Qf = null_space(Hf, rtol=rtol)
        Q = np.zeros((n, Qf.shape[1]))
        Q[free] = Qf
    if Q.shape[1] == 0:
        warnings.warn("constraints leave no free spline coefficients", RuntimeWarning, stacklevel=2)
    return Q
