"""Triangulations of the rectangular time-by-quantile domain."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DomainError

#: Slack allowed when deciding whether a point lies inside a triangle or the domain.
LOCATE_TOL = 1e-9


@dataclass(frozen=True)
class BaryPoint:
    triangle_id: int
    coords: tuple[float, float, float]


@dataclass(frozen=True, eq=False)
class Triangulation:
    """A set of counterclockwise triangles tiling ``t_range x u_range``.

    Parameters
    ----------
    vertices : (V, 2) array
        Vertex coordinates as ``(t, u)`` pairs.
    triangles : (M, 3) int array
        Vertex indices of each triangle, counterclockwise.
    t_range, u_range : tuple of float
        The rectangle covered by the triangles.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    t_range: tuple[float, float]
    u_range: tuple[float, float]
    _affine: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        verts = np.ascontiguousarray(self.vertices, dtype=float)
        tris = np.ascontiguousarray(self.triangles, dtype=np.intp)
        if verts.ndim != 2 or verts.shape[1] != 2:
            raise DataError("vertices must have shape (V, 2)")
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise DataError("triangles must have shape (M, 3)")
        if tris.size and (tris.min() < 0 or tris.max() >= len(verts)):
            raise DataError("triangle references a missing vertex")
        verts.setflags(write=False)
        tris.setflags(write=False)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "triangles", tris)
        object.__setattr__(self, "t_range", (float(self.t_range[0]), float(self.t_range[1])))
        object.__setattr__(self, "u_range", (float(self.u_range[0]), float(self.u_range[1])))

        # Affine maps p -> (b1, b2); b3 = 1 - b1 - b2.
        p = verts[tris]  # (M, 3, 2)
        jac = np.stack([p[:, 0] - p[:, 2], p[:, 1] - p[:, 2]], axis=2)  # columns v1-v3, v2-v3
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        if np.any(det <= 0):
            bad = np.flatnonzero(det <= 0)
            raise DataError(f"degenerate or clockwise triangles: {bad.tolist()}")
        inv = np.linalg.inv(jac)  # (M, 2, 2)
        # Constant gradients of the three barycentric coordinates w.r.t. (t, u).
        grads = np.empty((len(tris), 3, 2))
        grads[:, :2, :] = inv
        grads[:, 2, :] = -inv[:, 0, :] - inv[:, 1, :]
        object.__setattr__(self, "_affine", (inv, p[:, 2].copy(), grads, 0.5 * det))

    @property
    def M(self) -> int:
        return len(self.triangles)

    @property
    def areas(self) -> np.ndarray:
        return self._affine[3]

    @property
    def bary_gradients(self) -> np.ndarray:
        """(M, 3, 2) gradients of the barycentric coordinates of each triangle."""
        return self._affine[2]

    def edges(self) -> dict[tuple[int, int], list[int]]:
        """Map each undirected edge ``(a, b)`` with ``a < b`` to the triangles sharing it."""
        out: dict[tuple[int, int], list[int]] = {}
        for m, (a, b, c) in enumerate(self.triangles.tolist()):
            for e in ((a, b), (b, c), (c, a)):
                out.setdefault((min(e), max(e)), []).append(m)
        return out

    def interior_edges(self) -> list[tuple[tuple[int, int], int, int]]:
        """Interior edges as ``((a, b), lower triangle, higher triangle)``."""
        result = []
        for e, ts in sorted(self.edges().items()):
            if len(ts) == 2:
                result.append((e, min(ts), max(ts)))
        return result

    def barycentric(self, points, triangle_ids) -> np.ndarray:
        """Barycentric coordinates of ``points`` relative to the given triangles."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        ids = np.asarray(triangle_ids, dtype=np.intp)
        inv, v3, _, _ = self._affine
        d = pts - v3[ids]
        b12 = np.einsum("nij,nj->ni", inv[ids], d)
        return np.column_stack([b12, 1.0 - b12.sum(axis=1)])

    def contains(self, points, tol: float = LOCATE_TOL) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        (t0, t1), (u0, u1) = self.t_range, self.u_range
        return (
            (pts[:, 0] >= t0 - tol) & (pts[:, 0] <= t1 + tol)
            & (pts[:, 1] >= u0 - tol) & (pts[:, 1] <= u1 + tol)
        )

    def locate_many(self, points, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized point location.

        Returns the containing triangle for every point (lowest index on shared
        edges) and the barycentric weights clamped to ``[0, 1]`` and renormalized.

        Raises
        ------
        DomainError
            If any point lies outside the domain.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != 2:
            raise DomainError("points must have shape (P, 2)")
        inside = self.contains(pts)
        if not inside.all():
            bad = pts[~inside][0]
            raise DomainError(f"point ({bad[0]:g}, {bad[1]:g}) lies outside the domain")
        inv, v3, _, _ = self._affine
        ids = np.empty(len(pts), dtype=np.intp)
        for start in range(0, len(pts), chunk):
            block = pts[start:start + chunk]
            d = block[:, None, :] - v3[None, :, :]  # (P, M, 2)
            b12 = np.einsum("mij,pmj->pmi", inv, d)
            bmin = np.minimum(np.minimum(b12[..., 0], b12[..., 1]), 1.0 - b12.sum(axis=2))
            # first triangle (lowest index) containing the point; fall back to
            # the least-violating one for points within the domain slack
            ok = bmin >= -LOCATE_TOL
            has = ok.any(axis=1)
            first = np.argmax(ok, axis=1)
            first[~has] = np.argmax(bmin[~has], axis=1)
            ids[start:start + chunk] = first
        bary = np.clip(self.barycentric(pts, ids), 0.0, 1.0)
        bary /= bary.sum(axis=1, keepdims=True)
        return ids, bary

    def locate(self, p) -> BaryPoint:
        ids, bary = self.locate_many(np.asarray(p, dtype=float).reshape(1, 2))
        return BaryPoint(int(ids[0]), tuple(float(b) for b in bary[0]))

    def mesh_size(self) -> float:
        """Length of the longest triangle edge."""
        a, b = np.array(list(self.edges().keys())).T
        return float(np.max(np.linalg.norm(self.vertices[a] - self.vertices[b], axis=1)))

    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    def to_csv(self, directory) -> tuple[str, str]:
        """Write ``vertices.csv`` and ``triangles.csv`` into ``directory``."""
        os.makedirs(directory, exist_ok=True)
        vpath = os.path.join(directory, "vertices.csv")
        tpath = os.path.join(directory, "triangles.csv")
        with open(vpath, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["vertex", "t", "u"])
            for k, (t, u) in enumerate(self.vertices.tolist()):
                w.writerow([k, repr(t), repr(u)])
        with open(tpath, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["triangle", "v0", "v1", "v2"])
            for k, tri in enumerate(self.triangles.tolist()):
                w.writerow([k, *tri])
        return vpath, tpath

    @classmethod
    def from_csv(cls, directory) -> "Triangulation":
        with open(os.path.join(directory, "vertices.csv"), newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        verts = np.array([[float(r[1]), float(r[2])] for r in rows])
        with open(os.path.join(directory, "triangles.csv"), newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        tris = np.array([[int(r[1]), int(r[2]), int(r[3])] for r in rows], dtype=np.intp)
        t_range = (verts[:, 0].min(), verts[:, 0].max())
        u_range = (verts[:, 1].min(), verts[:, 1].max())
        return cls(verts, tris, t_range, u_range)


def build_rect_triangulation(t_range, u_range, n_t: int, n_u_cells: int) -> Triangulation:
    """Uniform grid of ``n_t x n_u_cells`` cells, each cut along its main diagonal.

    Triangles of cell ``(a, b)`` (``a`` along t, ``b`` along u) get indices
    ``2 * (b * n_t + a)`` (below the diagonal) and ``2 * (b * n_t + a) + 1``.
    """
    t0, t1 = map(float, t_range)
    u0, u1 = map(float, u_range)
    if not (t1 > t0) or not (u1 > u0):
        raise ConfigError(f"empty or inverted domain: t in {t_range}, u in {u_range}")
    if int(n_t) != n_t or int(n_u_cells) != n_u_cells or n_t < 1 or n_u_cells < 1:
        raise ConfigError(f"cell counts must be positive integers, got ({n_t}, {n_u_cells})")
    n_t, n_u_cells = int(n_t), int(n_u_cells)
    ts = np.linspace(t0, t1, n_t + 1)
    us = np.linspace(u0, u1, n_u_cells + 1)
    tt, uu = np.meshgrid(ts, us)  # row b = u index
    verts = np.column_stack([tt.ravel(), uu.ravel()])

    def vid(a, b):
        return b * (n_t + 1) + a

    tris = []
    for b in range(n_u_cells):
        for a in range(n_t):
            p00, p10, p11, p01 = vid(a, b), vid(a + 1, b), vid(a + 1, b + 1), vid(a, b + 1)
            tris.append((p00, p10, p11))
            tris.append((p00, p11, p01))
    return Triangulation(verts, np.array(tris, dtype=np.intp), (t0, t1), (u0, u1))
