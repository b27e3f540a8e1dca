import warnings

import numpy as np
import pytest

from lsfqr.design import FunctionalDataset, QuantileGrid, SplineSpace, assemble_design
from lsfqr.mesh import build_rect_triangulation
from lsfqr.solver import Option, _group_maps


def tiny_design(seed, n=10, n_u=3, nt=2, nuc=1, d=3, r=1, n_b=4, order=2, signal=0.05, local=False):
    """Small random problem; ``local=True`` puts the slope on t < 1/3 only."""
    rng = np.random.default_rng(seed)
    tri = build_rect_triangulation((0, 1), (0.1, 0.9), nt, nuc)
    space = SplineSpace.build(tri, d, r)
    t = np.linspace(0, 1, 21)
    X = rng.standard_normal((n, 3)) @ np.vstack([np.ones_like(t), np.cos(np.pi * t), np.cos(2 * np.pi * t)])
    Z = np.column_stack([np.ones(n), rng.standard_normal(n)])
    beta = np.sin(3 * np.pi * t) * (t < 1 / 3) if local else np.sin(np.pi * t)
    y = Z @ [1.0, 0.5] + X @ (beta * signal) + 0.3 * rng.standard_normal(n)
    ds = FunctionalDataset(t, X, Z, y)
    return assemble_design(ds, QuantileGrid.uniform(0.2, 0.8, n_u), space, n_b=n_b, order=order)


def intercept_only_design(y, u=0.5):
    """Single level, constant covariate, no functional block."""
    n = len(y)
    tri = build_rect_triangulation((0, 1), (u - 0.1, u + 0.1), 1, 1)
    space = SplineSpace.build(tri, 3, 1)
    ds = FunctionalDataset(np.linspace(0, 1, 5), np.zeros((n, 5)), np.ones((n, 1)), y)
    D = assemble_design(ds, QuantileGrid([u]), space, n_b=1, order=1)
    return D.with_Q(np.zeros((space.basis.n_basis, 0)))


def reference_solve(D, lam1, lam2=0.0, weights=None, option="initial"):
    """Same objective handed to a generic conic solver at tight tolerances.

    Returns ``(objective value, block norms of gamma)``.
    """
    cp = pytest.importorskip("cvxpy")
    x = cp.Variable(D.W.shape[1])
    na = D.n_alpha
    res = D.y - D.W @ x
    loss = cp.sum(cp.multiply(D.level, res) + cp.pos(-res)) / len(D.y)
    ev, V = np.linalg.eigh(D.G_reduced)
    root = V * np.sqrt(np.clip(ev, 0, None))
    obj = loss + lam1 * cp.sum_squares(root.T @ x[na:])
    opt = Option.parse(option)
    if lam2 and opt is not Option.INITIAL:
        C, nl = _group_maps(D, opt)
        g = C @ x[na:]
        obj = obj + lam2 * sum(weights[j] * cp.norm(g[j * nl:(j + 1) * nl]) for j in range(len(weights)))
    prob = cp.Problem(cp.Minimize(obj))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        prob.solve(solver="CLARABEL", tol_gap_abs=1e-11, tol_gap_rel=1e-11, tol_feas=1e-11)
    gamma = D.Q @ x.value[na:]
    norms = np.linalg.norm(gamma.reshape(-1, D.space.basis.n_local), axis=1)
    return prob.value, norms


@pytest.fixture
def unit_mesh():
    return build_rect_triangulation((0, 1), (0, 1), 4, 4)


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
