from math import factorial

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from lsfqr.bernstein import BernsteinBasis
from lsfqr.errors import DataError
from lsfqr.mesh import build_rect_triangulation
from lsfqr.penalties import build_penalties, reduce, roughness_matrix, triangle_gram
from lsfqr.quadrature import triangle_rule


@pytest.fixture(scope="module")
def cubic():
    tri = build_rect_triangulation((0, 1), (0, 1), 4, 4)
    basis = BernsteinBasis(tri, 3, 1)
    return basis, roughness_matrix(basis)


@pytest.mark.parametrize("a,b,c", [(0, 0, 0), (1, 0, 0), (2, 1, 0), (3, 3, 2), (5, 0, 4)])
def test_quadrature_monomials(a, b, c):
    # int over the reference triangle of b1^a b2^b b3^c = 2 A a! b! c! / (a+b+c+2)!, A = 1/2
    bary, w = triangle_rule(a + b + c)
    got = 0.5 * np.sum(w * bary[:, 0] ** a * bary[:, 1] ** b * bary[:, 2] ** c)
    exact = factorial(a) * factorial(b) * factorial(c) / factorial(a + b + c + 2)
    assert got == pytest.approx(exact, rel=1e-13)


@pytest.mark.parametrize("f,energy", [
    (lambda t, u: t ** 2, 4.0),
    (lambda t, u: t ** 2 * u, 4.0),   # 4u^2 + 2 (2t)^2
    (lambda t, u: t ** 3, 12.0),
    (lambda t, u: t * u, 2.0),
])
def test_closed_form_energy(cubic, f, energy):
    basis, G = cubic
    g = basis.interpolate(f)
    assert g @ G @ g == pytest.approx(energy, abs=1e-8)


@pytest.mark.parametrize("f", [lambda t, u: np.ones_like(t), lambda t, u: t, lambda t, u: 1 - 2 * t + 5 * u])
def test_affine_annihilated(cubic, f):
    basis, G = cubic
    g = basis.interpolate(f)
    assert g @ G @ g < 1e-9 * max(1.0, g @ g)


def test_symmetric_psd(cubic):
    basis, G = cubic
    assert np.abs(G - G.T).max() < 1e-12
    ev = np.linalg.eigvalsh(G)
    assert ev.min() >= -1e-9 * ev.max()
    for m in range(basis.tri.M):
        Mm = triangle_gram(basis, m)
        assert np.abs(Mm - Mm.T).max() < 1e-12
        assert np.linalg.eigvalsh(Mm).min() > 0


def test_low_degree_warns():
    basis = BernsteinBasis(build_rect_triangulation((0, 1), (0, 1), 2, 2), 1, 0)
    with pytest.warns(RuntimeWarning):
        G = roughness_matrix(basis)
    assert not G.any()


def test_gram_ones_and_d0():
    tri = build_rect_triangulation((0, 2), (0.1, 0.9), 3, 2)
    basis = BernsteinBasis(tri, 3, 1)
    for m in (0, 5, 11):
        v = np.ones(basis.n_local)
        assert v @ triangle_gram(basis, m) @ v == pytest.approx(tri.areas[m], rel=1e-12)
    b0 = BernsteinBasis(tri, 0, -1)
    np.testing.assert_allclose(triangle_gram(b0, 3), [[tri.areas[3]]], rtol=1e-14)


def test_gram_corner_entry():
    tri = build_rect_triangulation((0, 1), (0, 1), 1, 1)
    basis = BernsteinBasis(tri, 2, 1)
    M0 = triangle_gram(basis, 0)
    area = tri.areas[0]
    assert M0[0, 0] == pytest.approx(area / 15, rel=1e-13)
    # cross-check with adaptive quadrature over the same triangle (0,0)-(1,0)-(1,1)
    b1 = lambda u, t: (1 - t) ** 4  # first vertex is the origin, b1 = 1 - t there
    val, _ = integrate.dblquad(b1, 0, 1, 0, lambda t: t)
    assert M0[0, 0] == pytest.approx(val, rel=1e-9)


def test_quadrature_order_robust(cubic):
    basis, G = cubic
    G2 = roughness_matrix(basis, extra_degree=2 * (basis.d - 2) + 2)
    assert np.abs(G2 - G).max() <= 1e-10 * np.abs(G).max()
    M = triangle_gram(basis, 3)
    M2 = triangle_gram(basis, 3, extra_degree=2 * basis.d)
    assert np.abs(M2 - M).max() <= 1e-10 * np.abs(M).max()


def test_gram_scaling_law():
    coarse = BernsteinBasis(build_rect_triangulation((0, 1), (0, 1), 2, 2), 3, 1)
    fine = BernsteinBasis(build_rect_triangulation((0, 1), (0, 1), 4, 4), 3, 1)
    # triangle 0 of both meshes has the same shape and vertex order
    np.testing.assert_allclose(triangle_gram(fine, 0), triangle_gram(coarse, 0) / 4, rtol=1e-12)


def test_reduce_examples(cubic):
    basis, G = cubic
    np.testing.assert_array_equal(reduce(G, np.eye(len(G))), G)
    Q = basis.constraint_system().Q
    assert not reduce(np.zeros_like(G), Q).any()
    with pytest.raises(DataError):
        reduce(G, Q[:-1])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_reduce_identity(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((12, 12))
    G = A @ A.T
    Q, _ = np.linalg.qr(rng.standard_normal((12, 5)))
    th = rng.standard_normal(5)
    lhs = th @ reduce(G, Q) @ th
    rhs = (Q @ th) @ G @ (Q @ th)
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


def test_pack(cubic):
    basis, G = cubic
    Q = basis.constraint_system().Q
    pack = build_penalties(basis, Q)
    np.testing.assert_array_equal(pack.G, G)
    assert len(pack.grams) == basis.tri.M
    assert pack.G_reduced.shape == (Q.shape[1],) * 2
