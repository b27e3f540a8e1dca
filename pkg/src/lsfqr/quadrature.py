"""Triangle quadrature exact for polynomials of a requested total degree."""

from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Collapsed Gauss rule on the reference triangle.

    Gauss-Legendre along the collapsed coordinate and Gauss-Jacobi
    (weight ``1 - x``) across it, so the rule integrates every polynomial of
    total degree ``<= degree`` exactly.

    Returns
    -------
    bary : (nq, 3) array
        Barycentric coordinates of the nodes.
    weights : (nq,) array
        Weights summing to 1; multiply by the triangle area.
    """
    n = max(1, (int(degree) + 2) // 2)
    x, wx = roots_legendre(n)
    y, wy = roots_jacobi(n, 1.0, 0.0)
    # map to [0, 1]; Jacobi weight (1 - y) on [-1, 1] becomes 2 (1 - eta)
    xi, wxi = 0.5 * (x + 1.0), 0.5 * wx
    eta, weta = 0.5 * (y + 1.0), 0.25 * wy
    XI, ETA = np.meshgrid(xi, eta, indexing="ij")
    W = np.outer(wxi, weta)
    px = (XI * (1.0 - ETA)).ravel()
    py = ETA.ravel()
    bary = np.column_stack([1.0 - px - py, px, py])
    w = 2.0 * W.ravel()  # reference area is 1/2
    w.setflags(write=False)
    bary.setflags(write=False)
    return bary, w
