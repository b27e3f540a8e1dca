"""Roughness penalty and per-triangle Gram matrices."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .bernstein import BernsteinBasis
from .errors import DataError
from .quadrature import triangle_rule

# (d1, d2, weight) triples of the thin-plate energy s_tt^2 + 2 s_tu^2 + s_uu^2
SECOND_ORDER_TERMS = ((2, 0, 1.0), (1, 1, 2.0), (0, 2, 1.0))


@dataclass(frozen=True)
class PenaltyPack:
    G: np.ndarray
    G_reduced: np.ndarray
    grams: list


def roughness_matrix(basis: BernsteinBasis, extra_degree: int = 0) -> np.ndarray:
    """Assemble ``G`` with ``g' G g`` equal to the summed thin-plate energy.

    The integrand is a polynomial of degree ``2 (d - 2)`` on each triangle, so
    the quadrature below is exact; ``extra_degree`` only exists to check that.
    """
    n = basis.n_basis
    G = np.zeros((n, n))
    if basis.d < 2:
        warnings.warn("degree < 2: second derivatives vanish, roughness penalty is zero",
                      RuntimeWarning, stacklevel=2)
        return G
    bary, w = triangle_rule(2 * (basis.d - 2) + extra_degree)
    for m in range(basis.tri.M):
        wm = w * basis.tri.areas[m]
        blk = np.zeros((basis.n_local, basis.n_local))
        for d1, d2, c in SECOND_ORDER_TERMS:
            D = basis.local_eval(m, bary, (d1, d2))
            blk += c * (D.T * wm) @ D
        s = basis.block(m)
        G[s, s] = 0.5 * (blk + blk.T)
    return G


def triangle_gram(basis: BernsteinBasis, m: int, extra_degree: int = 0) -> np.ndarray:
    """``(M_m)_{ab} = integral over triangle m of B_a B_b``."""
    bary, w = triangle_rule(2 * basis.d + extra_degree)
    B = basis.local_eval(m, bary)
    M = (B.T * (w * basis.tri.areas[m])) @ B
    return 0.5 * (M + M.T)


def reduce(G, Q) -> np.ndarray:
    G = np.asarray(G, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if G.shape[0] != G.shape[1] or G.shape[1] != Q.shape[0]:
        raise DataError(f"cannot reduce G of shape {G.shape} with Q of shape {Q.shape}")
    Gr = Q.T @ G @ Q
    return 0.5 * (Gr + Gr.T)


def build_penalties(basis: BernsteinBasis, Q) -> PenaltyPack:
    G = roughness_matrix(basis)
    grams = [triangle_gram(basis, m) for m in range(basis.tri.M)]
    return PenaltyPack(G=G, G_reduced=reduce(G, Q), grams=grams)
