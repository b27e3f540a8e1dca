"""Convex fits of the simultaneous quantile model.

All three estimators minimize

    (1 / N) sum_k rho_{u_k}(y_k - w_k' [eta; theta])
        + lam1 * theta' G theta
        + lam2 * sum_j w_j * ||L_j' (Q theta)_[j]||_2

with ``N = n * n_u`` stacked rows.  ``L_j`` is the identity for the
coefficient-norm penalty and the Cholesky factor of the triangle Gram matrix
for the function-norm penalty.

Two methods are available.  ``"ipm"`` (default) hands the epigraph form to
CVXOPT's cone solver with a problem-specific Newton step; zero blocks are
read off the dual certificate.  ``"admm"`` is a first-order splitting with
variables for the check-loss residuals and the triangle blocks.  Either way,
blocks found to be zero are projected out exactly at the end.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg

from .bernstein import null_space
from .design import DesignBundle
from .errors import ConfigError, ConvergenceError, DataError

log = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-8
WEIGHT_CAP = 1e8
ZERO_RATIO = 1e-6
NULL_RTOL = 1e-10


class Option(str, Enum):
    INITIAL = "initial"
    COEF = "option1"
    FUNC = "option2"

    @classmethod
    def parse(cls, value) -> "Option":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {"1": cls.COEF, "option1": cls.COEF, "coef": cls.COEF,
                   "2": cls.FUNC, "option2": cls.FUNC, "func": cls.FUNC,
                   "initial": cls.INITIAL, "0": cls.INITIAL}
        if key not in aliases:
            raise ConfigError(f"unknown penalty option {value!r}")
        return aliases[key]


@dataclass
class SolverSettings:
    method: str = "ipm"
    ipm_tol: float = 1e-9
    ipm_loosest_tol: float = 1e-7
    ipm_refinement: int = 1
    ipm_max_iter: int = 100
    ipm_zero_slack: float = 1e-3
    abs_tol: float = 1e-7
    rel_tol: float = 1e-7
    max_iter: int = 20000
    rho: float = 1.0
    relax: float = 1.6
    adapt_every: int = 25
    raise_on_fail: bool = True


@dataclass
class FitResult:
    eta_hat: np.ndarray
    theta_hat: np.ndarray
    gamma_hat: np.ndarray
    Q: np.ndarray
    objective_value: float
    lam1: float
    lam2: float
    option: Option
    active_set: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def block_norms(self, n_local: int) -> np.ndarray:
        return np.linalg.norm(self.gamma_hat.reshape(-1, n_local), axis=1)


# -- elementwise pieces ---------------------------------------------------

def _check_level(u):
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0) or np.any(u >= 1):
        raise ConfigError("quantile level must lie in (0, 1)")
    return u


def check_loss(x, u):
    """Check function ``x (u - 1{x < 0})``."""
    u = _check_level(u)
    x = np.asarray(x, dtype=float)
    return np.where(x >= 0, u * x, (u - 1.0) * x)


def prox_check(v, u, tau):
    """Proximal map of ``tau * rho_u`` (elementwise)."""
    v = np.asarray(v, dtype=float)
    return v - np.clip(v, tau * (u - 1.0), tau * u)


def prox_group(v, kappa, M=None):
    """Block soft-threshold ``v * max(0, 1 - kappa / ||v||_M)``.

    With a metric ``M`` this is the proximal map of ``kappa * ||.||_M`` taken in
    the same metric.  Returns an exact zero block when ``||v||_M <= kappa``.
    """
    v = np.asarray(v, dtype=float)
    if M is None:
        nrm = np.linalg.norm(v)
    else:
        M = np.asarray(M, dtype=float)
        if not np.allclose(M, M.T):
            raise DataError("metric must be symmetric")
        try:
            L = np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            raise DataError("metric must be positive definite") from None
        nrm = np.linalg.norm(L.T @ v)
    if nrm <= kappa:
        return np.zeros_like(v)
    return v * (1.0 - kappa / nrm)


# -- problem plumbing -------------------------------------------------------

def _group_maps(design: DesignBundle, option: Option):
    """Per-triangle maps ``theta -> L_j' (Q theta)_[j]`` stacked into one matrix."""
    basis = design.space.basis
    nl = basis.n_local
    Qb = design.Q.reshape(basis.tri.M, nl, design.q)
    if option is Option.FUNC:
        Ls = [np.linalg.cholesky(Mj) for Mj in design.space.penalties.grams]
        Qb = np.stack([L.T @ Qb[j] for j, L in enumerate(Ls)])
    return Qb.reshape(basis.tri.M * nl, design.q), nl


def group_norms(design: DesignBundle, gamma, option) -> np.ndarray:
    """Triangle-level norms of a coefficient vector under the given option."""
    option = Option.parse(option)
    basis = design.space.basis
    blocks = np.asarray(gamma).reshape(basis.tri.M, basis.n_local)
    if option is Option.FUNC:
        grams = design.space.penalties.grams
        return np.sqrt(np.maximum([b @ Mj @ b for b, Mj in zip(blocks, grams)], 0.0))
    return np.linalg.norm(blocks, axis=1)


def objective(design: DesignBundle, eta, theta, lam1, lam2=0.0, weights=None, option=Option.INITIAL):
    """Value of the penalized objective at ``(eta, theta)``."""
    option = Option.parse(option)
    x = np.r_[eta, theta]
    res = design.y - design.W @ x
    val = float(np.mean(check_loss(res, design.level)))
    val += lam1 * float(theta @ design.G_reduced @ theta)
    if lam2 and option is not Option.INITIAL:
        val += lam2 * float(np.dot(weights, group_norms(design, design.Q @ theta, option)))
    return val


def _admm(W, y, u, Gpad, lam1, C, group_size, kappas, settings: SolverSettings, n_alpha):
    """Scaled ADMM on ``sum rho(r) + N lam1 x'Gx + sum kappa_j ||g_j||``.

    Constraints ``W x + r = y`` and ``C theta = g``.  The x-step carries a
    tiny proximal term so it stays well posed when ``W`` is rank deficient.
    """
    N, p = W.shape
    # very large roughness weights stall the dual residual; solve in rescaled coordinates
    T = _equilibrate(W[:, n_alpha:], Gpad[n_alpha:, n_alpha:], 2.0 * N * lam1)
    if T is not None:
        W = np.hstack([W[:, :n_alpha], W[:, n_alpha:] @ T])
        Gpad = Gpad.copy()
        Gpad[n_alpha:, n_alpha:] = T.T @ Gpad[n_alpha:, n_alpha:] @ T
        C = C @ T if C is not None else None
    has_groups = C is not None and C.shape[0] > 0
    if has_groups:
        # balance the two constraint blocks; the penalty is rescaled to match
        s = np.linalg.norm(W, 2) / max(np.linalg.norm(C, 2), 1e-300)
        C = s * C
        kappas = kappas / s
    WtW = W.T @ W
    CtC = np.zeros((p, p))
    if has_groups:
        CtC[n_alpha:, n_alpha:] = C.T @ C
    P2 = 2.0 * N * lam1 * Gpad
    scale = max(np.trace(WtW) / p, 1e-12)
    delta = 1e-10 * scale

    rho = settings.rho
    x = np.zeros(p)
    r = y.copy()
    z_res = np.zeros(N)
    g = np.zeros(C.shape[0]) if has_groups else None
    z_grp = np.zeros_like(g) if has_groups else None
    nG = len(kappas) if has_groups else 0

    def factor(rho):
        K = rho * (WtW + CtC) + P2
        K[np.diag_indices(p)] += delta
        return scipy.linalg.cho_factor(K)

    K = factor(rho)
    alpha = settings.relax
    prim = dual = np.inf
    it = 0
    history = []
    converged = False
    for it in range(1, settings.max_iter + 1):
        rhs = rho * (W.T @ (y - r - z_res)) + delta * x
        if has_groups:
            rhs[n_alpha:] += rho * (C.T @ (g - z_grp))
        x = scipy.linalg.cho_solve(K, rhs)
        Wx = W @ x
        Wx_h = alpha * Wx + (1 - alpha) * (y - r)
        r_old = r
        r = prox_check(y - Wx_h - z_res, u, 1.0 / rho)
        z_res += Wx_h + r - y
        if has_groups:
            Cx = C @ x[n_alpha:]
            Cx_h = alpha * Cx + (1 - alpha) * g
            g_old = g
            vv = (Cx_h + z_grp).reshape(nG, group_size)
            nrm = np.linalg.norm(vv, axis=1)
            shrink = np.maximum(0.0, 1.0 - kappas / (rho * np.maximum(nrm, 1e-300)))
            g = (vv * shrink[:, None]).ravel()
            z_grp += Cx_h - g

        if it % 5 == 0 or it == settings.max_iter:
            pr = Wx + r - y
            du = W.T @ (r - r_old)
            sq_ax = Wx @ Wx
            sq_bz = r @ r
            sq_dual = W.T @ z_res
            if has_groups:
                pg = Cx - g
                pr = np.r_[pr, pg]
                du = du.copy()
                du[n_alpha:] -= C.T @ (g - g_old)
                sq_ax += Cx @ Cx
                sq_bz += g @ g
                sq_dual = sq_dual.copy()
                sq_dual[n_alpha:] -= C.T @ z_grp
            prim = np.linalg.norm(pr)
            dual = rho * np.linalg.norm(du)
            m = len(pr)
            eps_pri = np.sqrt(m) * settings.abs_tol + settings.rel_tol * max(np.sqrt(sq_ax), np.sqrt(sq_bz), np.linalg.norm(y))
            eps_dual = np.sqrt(p) * settings.abs_tol + settings.rel_tol * rho * np.linalg.norm(sq_dual)
            history.append((it, prim, dual, rho))
            if prim <= eps_pri and dual <= eps_dual:
                converged = True
                break
            if it % settings.adapt_every == 0:
                if prim > 10 * dual:
                    rho *= 2.0
                    z_res /= 2.0
                    if has_groups:
                        z_grp /= 2.0
                    K = factor(rho)
                elif dual > 10 * prim:
                    rho /= 2.0
                    z_res *= 2.0
                    if has_groups:
                        z_grp *= 2.0
                    K = factor(rho)
    zero_groups = np.flatnonzero(np.all(g.reshape(nG, group_size) == 0, axis=1)) if has_groups else np.array([], dtype=int)
    if T is not None:
        x[n_alpha:] = T @ x[n_alpha:]
    diag = {
        "iterations": it,
        "primal_residual": float(prim),
        "dual_residual": float(dual),
        "rho": float(rho),
        "converged": converged,
        "history": history,
    }
    return x, zero_groups, diag


def _robust_cholesky(K):
    """Cholesky of a PSD matrix, with a growing ridge when roundoff breaks it."""
    K = 0.5 * (K + K.T)
    scale = max(np.trace(K) / len(K), 1e-300)
    for rel in (1e-13, 1e-11, 1e-9, 1e-7):
        Kr = K.copy()
        Kr[np.diag_indices(len(K))] += rel * scale
        try:
            return scipy.linalg.cho_factor(Kr)
        except np.linalg.LinAlgError:
            continue
    raise ArithmeticError("singular Newton system")


def _equilibrate(Wb, G, scale):
    """Map ``theta = T theta'`` that shrinks directions where ``scale * G`` dwarfs the data.

    Returns None when no direction needs it.  With ``G = V diag(ev) V'`` the
    stiff eigendirections are divided by ``sqrt(scale * ev / h)``, ``h`` the
    mean squared column norm of ``Wb``.
    """
    if scale <= 0 or G.size == 0:
        return None
    h = max(float(np.mean(np.sum(Wb * Wb, axis=0))), 1e-12)
    ev, V = np.linalg.eigh(G)
    stiff = scale * ev > h
    if not stiff.any():
        return None
    s = np.ones_like(ev)
    s[stiff] = np.sqrt(h / (scale * ev[stiff]))
    return V * s


def _free_directions(Wa, Wb, G):
    """Orthonormal basis of the theta directions the initial objective can see.

    A direction ``b`` is invisible when ``G b = 0`` and ``Wb b`` lies in the
    range of ``Wa`` (the shift is absorbed by the varying coefficients).
    Returns None when there is no such direction.
    """
    if Wb.shape[1] == 0:
        return None
    R = Wb
    if Wa.shape[1]:
        Qa = scipy.linalg.orth(Wa)
        R = Wb - Qa @ (Qa.T @ Wb)
    RtR = R.T @ R
    M = RtR / max(np.trace(RtR), 1e-300) + G / max(np.trace(G), 1e-300)
    ev, V = np.linalg.eigh(0.5 * (M + M.T))
    keep = ev > NULL_RTOL * max(ev.max(), 1e-300)
    if keep.all():
        return None
    return V[:, keep]


def _ipm(W, y, u, Gpad, lam1, C, group_size, kappas, settings: SolverSettings, n_alpha):
    """Primal-dual interior point solve of the epigraph form.

    Variables ``(x, t, s)``: ``t_k >= rho_{u_k}(y_k - w_k' x)`` as two linear
    inequalities per row and ``(s_j, C_j theta)`` in a second-order cone.
    The conic iterations are CVXOPT's; every Newton system is reduced here to
    a dense ``p x p`` solve with ``P + W' diag(lam) W + sum_j C_j' S_j C_j``.
    """
    from cvxopt import matrix, solvers, spmatrix

    N, p = W.shape
    # very large roughness weights stall the dual residual; solve in rescaled coordinates
    T = _equilibrate(W[:, n_alpha:], Gpad[n_alpha:, n_alpha:], 2.0 * N * lam1)
    C0 = C
    if T is not None:
        W = np.hstack([W[:, :n_alpha], W[:, n_alpha:] @ T])
        Gpad = Gpad.copy()
        Gpad[n_alpha:, n_alpha:] = T.T @ Gpad[n_alpha:, n_alpha:] @ T
        C = C @ T if C is not None else None
    has_groups = C is not None and C.shape[0] > 0
    nG = len(kappas) if has_groups else 0
    nl = group_size
    nv = p + N + nG
    ua, ub = u, 1.0 - u
    Px = 2.0 * N * lam1 * Gpad
    Cb = C.reshape(nG, nl, -1) if has_groups else None

    def split(v):
        return v[:p], v[p:p + N], v[p + N:]

    def g_apply(xx, tt, ss):
        out = np.empty(2 * N + nG * (nl + 1))
        Wx = W @ xx
        out[:N] = -ua * Wx - tt
        out[N:2 * N] = ub * Wx - tt
        if nG:
            blk = out[2 * N:].reshape(nG, nl + 1)
            blk[:, 0] = -ss
            blk[:, 1:] = -(C @ xx[n_alpha:]).reshape(nG, nl)
        return out

    def gt_apply(z):
        a, b = z[:N], z[N:2 * N]
        out = np.zeros(nv)
        out[:p] = W.T @ (-ua * a + ub * b)
        out[p:p + N] = -a - b
        if nG:
            blk = z[2 * N:].reshape(nG, nl + 1)
            out[p + N:] = -blk[:, 0]
            out[n_alpha:p] -= C.T @ blk[:, 1:].ravel()
        return out

    def Gop(x, yv, alpha=1.0, beta=0.0, trans="N"):
        xa = np.asarray(x).ravel()
        ya = np.asarray(yv).ravel()
        out = g_apply(*split(xa)) if trans == "N" else gt_apply(xa)
        ya[:] = alpha * out + beta * ya

    def Pop(x, yv, alpha=1.0, beta=0.0):
        xa = np.asarray(x).ravel()
        ya = np.asarray(yv).ravel()
        out = np.zeros(nv)
        out[:p] = Px @ xa[:p]
        ya[:] = alpha * out + beta * ya

    J = None
    if nG:
        J = -np.eye(nl + 1)
        J[0, 0] = 1.0

    def kktsolver(Wd):
        d = np.asarray(Wd["d"]).ravel()
        Da, Db = 1.0 / d[:N] ** 2, 1.0 / d[N:] ** 2
        e = Da + Db
        c = ua * Da - ub * Db
        lam = Da * Db / e
        K = Px + W.T @ (lam[:, None] * W)
        if nG:
            Winv = np.empty((nG, nl + 1, nl + 1))
            for j, (beta, v) in enumerate(zip(Wd["beta"], Wd["v"])):
                Jv = J @ np.asarray(v).ravel()
                Winv[j] = (2.0 * np.outer(Jv, Jv) - J) / beta
            Hinv = Winv @ Winv
            a = Hinv[:, 0, 0]
            bvec = Hinv[:, 1:, 0]
            S = Hinv[:, 1:, 1:] - bvec[:, :, None] * bvec[:, None, :] / a[:, None, None]
            K[n_alpha:, n_alpha:] += C.T @ (S @ Cb).reshape(nG * nl, -1)
            Cbv = (bvec[:, None, :] @ Cb)[:, 0, :]  # rows b_j' C_j
        fac = _robust_cholesky(K)

        def solve(x, yv, z):
            bx = np.asarray(x).ravel()
            bz = np.asarray(z).ravel()
            hb = np.empty_like(bz)
            hb[:N] = Da * bz[:N]
            hb[N:2 * N] = Db * bz[N:2 * N]
            if nG:
                hb[2 * N:] = (Hinv @ bz[2 * N:].reshape(nG, nl + 1, 1)).ravel()
            r = bx + gt_apply(hb)
            rx, rt, rs = split(r)
            rhs = rx - W.T @ (c * rt / e)
            if nG:
                rhs[n_alpha:] -= Cbv.T @ (rs / a)
            dx = scipy.linalg.cho_solve(fac, rhs)
            dt = (rt - c * (W @ dx)) / e
            ds = (rs - Cbv @ dx[n_alpha:]) / a if nG else np.zeros(0)
            ux = np.r_[dx, dt, ds]
            res = g_apply(dx, dt, ds) - bz
            zo = np.empty_like(bz)
            zo[:2 * N] = res[:2 * N] / d
            if nG:
                zo[2 * N:] = (Winv @ res[2 * N:].reshape(nG, nl + 1, 1)).ravel()
            np.asarray(x).ravel()[:] = ux
            np.asarray(z).ravel()[:] = zo

        return solve

    q = matrix(np.r_[np.zeros(p), np.ones(N), kappas if nG else np.zeros(0)])
    h = matrix(np.r_[-ua * y, ub * y, np.zeros(nG * (nl + 1))])
    dims = {"l": 2 * N, "q": [nl + 1] * nG, "s": []}
    A = spmatrix([], [], [], (0, nv))
    b = matrix(0.0, (0, 1))
    # cvxopt can stall on roundoff just short of a very tight target; loosen and retry
    tol, iters = settings.ipm_tol, 0
    while True:
        opts = {
            "show_progress": False,
            "abstol": tol * N,
            "reltol": tol,
            "feastol": tol,
            "maxiters": settings.ipm_max_iter,
            "refinement": settings.ipm_refinement,
        }
        last_try = tol * 10 > settings.ipm_loosest_tol * (1 + 1e-9)
        try:
            sol = solvers.coneqp(Pop, q, Gop, h, dims, A, b, kktsolver=kktsolver, options=opts)
        except (ValueError, ArithmeticError) as exc:
            if last_try:
                raise ConvergenceError(f"interior point solve failed: {exc}", {"method": "ipm"}) from exc
            tol *= 10
            continue
        iters += int(sol["iterations"])
        if sol["status"] == "optimal" or last_try:
            break
        tol *= 10
    v = np.asarray(sol["x"]).ravel()
    x = v[:p].copy()
    if T is not None:
        C = C0
        x[n_alpha:] = T @ x[n_alpha:]
    zero_groups = np.array([], dtype=int)
    if nG:
        norms = np.linalg.norm((C @ x[n_alpha:]).reshape(nG, nl), axis=1)
        zd = np.asarray(sol["z"]).ravel()[2 * N:].reshape(nG, nl + 1)
        # dual certificate: ||z_j|| = kappa_j on active groups, strictly less on zero ones.
        # Coupled blocks can be tiny but nonzero at the optimum, so a small slack alone
        # is not trusted; those blocks are judged by the primal eps_zero rule.
        slack = 1.0 - np.linalg.norm(zd[:, 1:], axis=1) / np.maximum(kappas, 1e-300)
        top = norms.max()
        certified = (slack > settings.ipm_zero_slack) & (kappas > 0)
        negligible = norms <= ZERO_RATIO * top if top > 0 else np.ones(nG, dtype=bool)
        zero_groups = np.flatnonzero(certified | negligible)
    diag = {
        "iterations": iters,
        "status": sol["status"],
        "tolerance": tol,
        "gap": float(sol["gap"]) / N if sol["gap"] is not None else None,
        "relative_gap": sol["relative gap"],
        "primal_residual": float(sol["primal infeasibility"] or 0.0),
        "dual_residual": float(sol["dual infeasibility"] or 0.0),
        "converged": sol["status"] == "optimal",
    }
    return x, zero_groups, diag


def _solve(design: DesignBundle, lam1: float, lam2: float, weights, option: Option,
           settings: SolverSettings | None) -> FitResult:
    settings = settings or SolverSettings()
    if lam1 < 0 or lam2 < 0:
        raise ConfigError("penalty weights must be nonnegative")
    W, y, u = design.W, design.y, design.level
    if not np.all(np.isfinite(y)):
        raise DataError("response contains non-finite values")
    N = len(y)
    na, q = design.n_alpha, design.q
    Gpad = np.zeros((na + q, na + q))
    Gpad[na:, na:] = design.G_reduced
    nl = design.space.basis.n_local
    C, kappas = None, None
    if option is not Option.INITIAL and lam2 > 0 and q > 0:
        weights = np.asarray(weights, dtype=float)
        M = design.space.basis.tri.M
        if weights.shape != (M,) or np.any(~np.isfinite(weights)) or np.any(weights <= 0):
            raise DataError("weights must be finite, positive, one per triangle")
        C, nl = _group_maps(design, option)
        kappas = N * lam2 * weights
    run = _ipm if settings.method == "ipm" else _admm
    # without a group term, directions unseen by both loss and roughness make
    # the minimizer non-unique; solve on their complement (minimum norm)
    P = _free_directions(W[:, :na], W[:, na:], design.G_reduced) if C is None else None
    if P is not None:
        Wr = np.hstack([W[:, :na], W[:, na:] @ P])
        Gr = np.zeros((na + P.shape[1],) * 2)
        Gr[na:, na:] = P.T @ design.G_reduced @ P
        x, zero_groups, diag = run(Wr, y, u, Gr, lam1, None, nl, None, settings, na)
        x = np.r_[x[:na], P @ x[na:]]
        diag["dropped_directions"] = int(q - P.shape[1])
    else:
        x, zero_groups, diag = run(W, y, u, Gpad, lam1, C, nl, kappas, settings, na)
    diag["method"] = settings.method
    eta, theta = x[:na], x[na:]
    Q = design.Q
    if len(zero_groups) and q > 0:
        # remove the O(tol) leftovers on blocks the prox zeroed
        rows = np.concatenate([np.arange(j * nl, (j + 1) * nl) for j in zero_groups])
        E = Q[rows]
        Nb = null_space(E)
        theta = Nb @ (Nb.T @ theta)
        gamma = Q @ theta
        gamma[rows] = 0.0
    else:
        gamma = Q @ theta
    obj = objective(design, eta, theta, lam1, lam2, weights, option)
    norms = np.linalg.norm(gamma.reshape(-1, nl), axis=1)
    thresh = ZERO_RATIO * norms.max() if norms.size and norms.max() > 0 else 0.0
    active = np.flatnonzero(norms > thresh) if thresh > 0 else np.array([], dtype=int)
    diag["objective"] = obj
    diag["n_rows"] = N
    if not diag["converged"]:
        msg = (f"{settings.method} stopped after {diag['iterations']} iterations "
               f"(primal {diag['primal_residual']:.3g}, dual {diag['dual_residual']:.3g})")
        if settings.raise_on_fail:
            raise ConvergenceError(msg, diag)
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
    return FitResult(eta, theta, gamma, Q, obj, float(lam1), float(lam2), option, active, diag)


def fit_initial(design: DesignBundle, lam: float, settings: SolverSettings | None = None) -> FitResult:
    """Roughness-penalized fit without any sparsity term, cold-started at zero."""
    return _solve(design, lam, 0.0, None, Option.INITIAL, settings)


def adaptive_weights(initial: FitResult, option, design: DesignBundle, a_w: float = 1.0,
                     floor: float = WEIGHT_FLOOR, cap: float = WEIGHT_CAP) -> np.ndarray:
    """Adaptive group weights ``||initial block||^(-a_w)``, capped at ``cap``."""
    option = Option.parse(option)
    if option is Option.INITIAL:
        raise ConfigError("adaptive weights need option 1 or 2")
    if a_w <= 0:
        raise ConfigError("weight exponent must be positive")
    norms = group_norms(design, initial.gamma_hat, option)
    with np.errstate(divide="ignore"):
        w = np.where(norms < floor, cap, norms ** (-a_w))
    return np.minimum(w, cap)


def fit_sparse(design: DesignBundle, lam1: float, lam2: float, weights, option,
               settings: SolverSettings | None = None) -> FitResult:
    """Roughness plus adaptive group-LASSO fit."""
    option = Option.parse(option)
    if option is Option.INITIAL:
        raise ConfigError("fit_sparse needs option 1 or 2")
    return _solve(design, lam1, lam2, weights, option, settings)


def refit_active(design: DesignBundle, lam1: float, active_set,
                 settings: SolverSettings | None = None) -> FitResult:
    """Roughness-penalized refit with every triangle outside ``active_set`` fixed at zero."""
    active_set = np.asarray(sorted(set(int(j) for j in active_set)), dtype=int)
    if active_set.size == 0:
        warnings.warn("empty active set: fitting the varying-coefficient part only",
                      RuntimeWarning, stacklevel=2)
    sub = design.restrict_to(active_set)
    return _solve(sub, lam1, 0.0, None, Option.INITIAL, settings)


def lambda2_max(design: DesignBundle, weights, option, base: FitResult | None = None) -> float:
    """Scale at which each triangle's loss gradient is matched by its penalty.

    Computed from the varying-coefficient-only fit; used to place default
    sparsity grids, not as an exact critical value.
    """
    option = Option.parse(option)
    if base is None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            base = refit_active(design, 0.0, [], SolverSettings(raise_on_fail=False))
    res = design.y - design.Zb @ base.eta_hat
    psi = design.level - (res < 0)
    grad = -(design.A.T @ psi) / len(design.y)
    basis = design.space.basis
    gb = grad.reshape(basis.tri.M, basis.n_local)
    if option is Option.FUNC:
        grams = design.space.penalties.grams
        gn = np.array([np.sqrt(max(g @ np.linalg.solve(Mj, g), 0.0)) for g, Mj in zip(gb, grams)])
    else:
        gn = np.linalg.norm(gb, axis=1)
    return float(np.max(gn / np.asarray(weights)))
