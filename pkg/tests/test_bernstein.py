from math import comb, factorial

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsfqr.bernstein import BernsteinBasis, multi_indices, null_space, restricted_null_space
from lsfqr.errors import ConfigError, DataError
from lsfqr.mesh import build_rect_triangulation


def _random_points_in(tri, m, k, rng):
    """Uniform points strictly inside triangle m."""
    b = rng.dirichlet(np.ones(3), size=k)
    b = 0.98 * b + 0.02 / 3
    return b @ tri.vertices[tri.triangles[m]], b


def _direct_bernstein(b, d):
    # independent closed form, one basis at a time
    return np.array([factorial(d) / (factorial(i) * factorial(j) * factorial(k)) * b[0] ** i * b[1] ** j * b[2] ** k
                     for i, j, k in multi_indices(d)])


def test_centroid_values_d2():
    tri = build_rect_triangulation((0, 1), (0, 1), 2, 2)
    basis = BernsteinBasis(tri, 2, 1)
    c = tri.centroids()[0]
    row = basis.eval(c[None]).toarray()[0]
    vals = row[basis.block(0)]
    assert vals.sum() == pytest.approx(1.0, abs=1e-14)
    k = [tuple(mi) for mi in multi_indices(2).tolist()].index((1, 1, 0))
    assert vals[k] == pytest.approx(2 / 9, abs=1e-14)
    np.testing.assert_allclose(vals, _direct_bernstein([1 / 3] * 3, 2), atol=1e-14)
    # nothing leaks onto other triangles
    assert np.count_nonzero(row) == np.count_nonzero(vals)


@pytest.mark.parametrize("d", [1, 2, 3, 4])
def test_matches_closed_form(d):
    rng = np.random.default_rng(d)
    tri = build_rect_triangulation((0, 2), (0.1, 0.9), 3, 2)
    basis = BernsteinBasis(tri, d, 0)
    for m in range(tri.M):
        pts, b = _random_points_in(tri, m, 5, rng)
        E = basis.eval(pts, triangle_ids=np.full(5, m)).toarray()
        ref = np.array([_direct_bernstein(bb, d) for bb in b])
        np.testing.assert_allclose(E[:, basis.block(m)], ref, atol=1e-13)


@pytest.mark.parametrize("deriv", [(1, 0), (0, 1)])
def test_first_derivative_finite_difference(deriv):
    rng = np.random.default_rng(0)
    tri = build_rect_triangulation((0, 1), (0.05, 0.95), 3, 3)
    basis = BernsteinBasis(tri, 3, 1)
    h = 1e-5
    e = np.array(deriv, dtype=float)
    for m in range(tri.M):
        p, _ = _random_points_in(tri, m, 3, rng)
        ids = np.full(3, m)
        D = basis.eval(p, deriv, triangle_ids=ids).toarray()
        fd = (basis.eval(p + h * e, triangle_ids=ids) - basis.eval(p - h * e, triangle_ids=ids)).toarray() / (2 * h)
        np.testing.assert_allclose(D, fd, atol=1e-6)


def test_second_derivative_finite_difference():
    rng = np.random.default_rng(1)
    tri = build_rect_triangulation((0, 1), (0, 1), 2, 2)
    basis = BernsteinBasis(tri, 4, 1)
    h = 1e-4
    p, _ = _random_points_in(tri, 5, 4, rng)
    ids = np.full(4, 5)
    Dtu = basis.eval(p, (1, 1), triangle_ids=ids).toarray()
    f = lambda dt, du: basis.eval(p + [dt, du], triangle_ids=ids).toarray()
    fd = (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4 * h * h)
    np.testing.assert_allclose(Dtu, fd, atol=1e-5)


def test_derivative_order_too_high():
    basis = BernsteinBasis(build_rect_triangulation((0, 1), (0, 1), 1, 1), 2, 1)
    with pytest.raises(ConfigError):
        basis.eval([[0.2, 0.1]], (2, 1))


def test_two_triangle_c0_linear():
    tri = build_rect_triangulation((0, 1), (0, 1), 1, 1)
    basis = BernsteinBasis(tri, 1, 0)
    H = basis.smoothness_constraints()
    assert H.shape == (2, 6)
    shared = set(tri.triangles[0]) & set(tri.triangles[1])
    for row in H:
        nz = np.flatnonzero(row)
        assert len(nz) == 2
        assert sorted(row[nz]) == [-1.0, 1.0]
        # both columns attach to the same shared vertex
        verts = {int(tri.triangles[m][list(basis.local_indices[k]).index(1)])
                 for m, k in (divmod(j, basis.n_local) for j in nz)}
        assert len(verts) == 1 and verts <= shared


def test_r_not_below_d_rejected():
    basis = BernsteinBasis(build_rect_triangulation((0, 1), (0, 1), 2, 2), 2, 2)
    with pytest.raises(ConfigError):
        basis.smoothness_constraints()


def test_null_space_examples():
    np.testing.assert_array_equal(null_space(np.zeros((0, 4))), np.eye(4))
    Q = null_space([[1.0, -1.0]])
    assert Q.shape == (2, 1)
    np.testing.assert_allclose(np.abs(Q[:, 0]), [2 ** -0.5] * 2, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(2, 15), st.integers(0, 2**31 - 1))
def test_null_space_random(k, n, seed):
    rng = np.random.default_rng(seed)
    H = rng.standard_normal((k, n))
    if k > 2:
        H[-1] = H[0] + H[1]  # rank deficient
    Q, rank = null_space(H, return_rank=True)
    assert np.abs(H @ Q).max(initial=0) < 1e-10
    assert np.abs(Q.T @ Q - np.eye(Q.shape[1])).max(initial=0) < 1e-10
    assert rank + Q.shape[1] == n
    assert rank == np.linalg.matrix_rank(H)


@pytest.mark.parametrize("nt,nu", [(1, 1), (2, 3), (4, 4)])
def test_c1_cubic_dimension(nt, nu):
    # dim S^1_3 = 3 V_B + 2 V_I + 1 when no interior vertex is singular
    tri = build_rect_triangulation((0, 1), (0, 1), nt, nu)
    cs = BernsteinBasis(tri, 3, 1).constraint_system()
    VB, VI = 2 * (nt + nu), (nt - 1) * (nu - 1)
    assert cs.q == 3 * VB + 2 * VI + 1
    assert cs.rank + cs.q == cs.H.shape[1]


@pytest.mark.parametrize("d", [1, 2, 3])
def test_c0_dimension(d):
    tri = build_rect_triangulation((0, 1), (0, 1), 3, 2)
    cs = BernsteinBasis(tri, d, 0).constraint_system()
    V, E = len(tri.vertices), len(tri.edges())
    assert cs.q == V + (d - 1) * E + comb(d - 1, 2) * tri.M


def test_eval_spline_examples():
    rng = np.random.default_rng(3)
    tri = build_rect_triangulation((0, 1), (0, 1), 2, 2)
    basis = BernsteinBasis(tri, 2, 1)
    pts = rng.uniform(0, 1, (50, 2))
    np.testing.assert_allclose(basis.eval_spline(np.ones(basis.n_basis), pts), 1.0, atol=1e-13)
    assert np.all(basis.eval_spline(np.zeros(basis.n_basis), pts) == 0)
    g = rng.standard_normal(basis.n_basis)
    c = tri.centroids()
    direct = [g[basis.block(m)] @ _direct_bernstein([1 / 3] * 3, 2) for m in range(tri.M)]
    np.testing.assert_allclose(basis.eval_spline(g, c), direct, atol=1e-13)
    with pytest.raises(DataError):
        basis.eval_spline(g[:-1], c)


@pytest.mark.parametrize("d", [1, 2, 3, 4])
def test_polynomial_reproduction(d):
    rng = np.random.default_rng(d)
    tri = build_rect_triangulation((0, 1), (0.05, 0.95), 3, 2)
    basis = BernsteinBasis(tri, d, min(1, d - 1))
    pts = np.column_stack([rng.uniform(0, 1, 200), rng.uniform(0.05, 0.95, 200)])
    for f in (lambda t, u: t, lambda t, u: u, lambda t, u: 2 - t + 3 * u):
        g = basis.interpolate(f)
        np.testing.assert_allclose(basis.eval_spline(g, pts), f(pts[:, 0], pts[:, 1]), atol=1e-9)
        # a globally smooth polynomial satisfies every constraint
        H = basis.smoothness_constraints()
        assert np.abs(H @ g).max() < 1e-10


def test_local_support():
    rng = np.random.default_rng(4)
    tri = build_rect_triangulation((0, 1), (0, 1), 3, 3)
    basis = BernsteinBasis(tri, 3, 1)
    g = rng.standard_normal(basis.n_basis)
    g[basis.block(7)] = 0
    p, _ = _random_points_in(tri, 7, 100, rng)
    assert np.all(basis.eval(p, triangle_ids=np.full(100, 7)) @ g == 0)


def _edge_points(tri, e, k, rng):
    a, b = tri.vertices[list(e)]
    s = rng.uniform(0.01, 0.99, k)
    return a + s[:, None] * (b - a)


def test_two_sided_values_and_gradients():
    rng = np.random.default_rng(5)
    tri = build_rect_triangulation((0, 1), (0.1, 0.9), 3, 3)
    basis = BernsteinBasis(tri, 3, 1)
    Q = basis.constraint_system().Q
    gammas = Q @ rng.standard_normal((Q.shape[1], 5))
    for e, t1, t2 in tri.interior_edges():
        p = _edge_points(tri, e, 20, rng)
        for deriv in ((0, 0), (1, 0), (0, 1)):
            L = basis.eval(p, deriv, triangle_ids=np.full(len(p), t1)) @ gammas
            R = basis.eval(p, deriv, triangle_ids=np.full(len(p), t2)) @ gammas
            np.testing.assert_allclose(L, R, atol=1e-9 * max(1, np.abs(L).max()))


def test_c1_breaks_without_constraints():
    # sanity check on the oracle above: a random gamma is discontinuous
    rng = np.random.default_rng(6)
    tri = build_rect_triangulation((0, 1), (0, 1), 1, 1)
    basis = BernsteinBasis(tri, 3, 1)
    g = rng.standard_normal(basis.n_basis)
    (e, t1, t2), = tri.interior_edges()
    p = _edge_points(tri, e, 5, rng)
    L = basis.eval(p, triangle_ids=np.zeros(5, int)) @ g
    R = basis.eval(p, triangle_ids=np.ones(5, int)) @ g
    assert np.abs(L - R).max() > 1e-3


def test_restricted_null_space_zeros():
    tri = build_rect_triangulation((0, 1), (0, 1), 3, 2)
    basis = BernsteinBasis(tri, 3, 1)
    H = basis.smoothness_constraints()
    zero_cols = list(range(basis.block(0).start, basis.block(1).stop))
    Q = restricted_null_space(H, zero_cols)
    assert np.all(Q[zero_cols] == 0)
    assert np.abs(H @ Q).max() < 1e-10
    # same space as the null space of H stacked with selector rows
    S = np.zeros((len(zero_cols), basis.n_basis))
    S[np.arange(len(zero_cols)), zero_cols] = 1
    ref = null_space(np.vstack([H, S]))
    assert Q.shape[1] == ref.shape[1]
    P1, P2 = Q @ Q.T, ref @ ref.T
    np.testing.assert_allclose(P1, P2, atol=1e-9)
