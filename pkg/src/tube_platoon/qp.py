"""Small dense convex QP solver.

Solves ``min 0.5 x'Px + q'x  s.t.  l <= A x <= u`` with an operator-splitting
(ADMM) iteration in the OSQP form, followed by an active-set polish that
recovers the exact solution once the active constraints are identified.
Equality rows are rows with ``l == u``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import linprog

SOLVED = "solved"
PRIMAL_INFEASIBLE = "primal_infeasible"
MAX_ITER = "max_iter"


@dataclass
class QPResult:
    status: str
    x: np.ndarray | None
    y: np.ndarray | None
    iterations: int
    prim_res: float
    dual_res: float
    polished: bool = False


def kkt_residuals(p, q, a, l, u, x, y) -> tuple[float, float]:
    """Primal (bound violation) and dual (stationarity) residuals, max-abs."""
    ax = a @ x
    prim = float(np.max(np.maximum(l - ax, 0) + np.maximum(ax - u, 0), initial=0.0))
    dual = float(np.max(np.abs(p @ x + q + a.T @ y), initial=0.0))
    return prim, dual


def _ruiz(p, a, iters=15):
    n, m = p.shape[0], a.shape[0]
    d = np.ones(n)
    e = np.ones(m)
    ps, as_ = p.copy(), a.copy()
    for _ in range(iters):
        col = np.maximum(np.abs(ps).max(axis=0), np.abs(as_).max(axis=0) if m else 0)
        row = np.abs(as_).max(axis=1) if m else np.zeros(0)
        dd = 1.0 / np.sqrt(np.where(col > 1e-12, col, 1.0))
        ee = 1.0 / np.sqrt(np.where(row > 1e-12, row, 1.0))
        ps = dd[:, None] * ps * dd[None, :]
        as_ = ee[:, None] * as_ * dd[None, :]
        d *= dd
        e *= ee
    return d, e


def _polish(p, q, a, l, u, x, y, eq, tol, max_passes=25):
    """Exact solve on a guessed active set, corrected until KKT holds."""
    m = a.shape[0]
    z = a @ x
    lower = (~eq) & (z - l < -y)
    upper = (~eq) & (u - z < y)
    n = p.shape[0]
    scale = max(1.0, np.max(np.abs(q), initial=0.0))
    for _ in range(max_passes):
        act = eq | lower | upper
        idx = np.flatnonzero(act)
        target = np.where(lower, l, u)[idx]
        a_act = a[idx]
        k = len(idx)
        kkt = np.zeros((n + k, n + k))
        kkt[:n, :n] = p
        kkt[:n, n:] = a_act.T
        kkt[n:, :n] = a_act
        rhs = np.concatenate([-q, target])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            return None
        for _ in range(2):
            sol = sol + np.linalg.solve(kkt, rhs - kkt @ sol)
        xp = sol[:n]
        yp = np.zeros(m)
        yp[idx] = sol[n:]
        if not np.all(np.isfinite(sol)):
            return None
        ax = a @ xp
        viol_lo = ax < l - tol * np.maximum(1.0, np.abs(l))
        viol_hi = ax > u + tol * np.maximum(1.0, np.abs(u))
        if np.any((viol_lo | viol_hi) & act):
            return None
        bad_lo = lower & (yp > tol * scale)
        bad_hi = upper & (yp < -tol * scale)
        if not (viol_lo.any() or viol_hi.any() or bad_lo.any() or bad_hi.any()):
            return xp, yp
        lower = (lower & ~bad_lo) | viol_lo
        upper = (upper & ~bad_hi) | viol_hi
    return None


def solve_qp(
    p,
    q,
    a,
    l,
    u,
    eps_abs: float = 1e-8,
    eps_rel: float = 1e-8,
    max_iter: int = 50_000,
    rho: float = 0.1,
    sigma: float = 1e-6,
    alpha: float = 1.6,
    check_every: int = 25,
    polish: bool = True,
) -> QPResult:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    a = np.asarray(a, dtype=float).reshape(-1, p.shape[0])
    l = np.asarray(l, dtype=float)
    u = np.asarray(u, dtype=float)
    n, m = p.shape[0], a.shape[0]
    eq = np.isclose(l, u, rtol=0, atol=1e-14)

    if polish:
        # common case: the inequalities are inactive at the optimum
        sol = _polish(p, q, a, l, u, np.zeros(n), np.zeros(m), eq, eps_abs, max_passes=8)
        if sol is not None:
            pr, du = kkt_residuals(p, q, a, l, u, *sol)
            return QPResult(SOLVED, sol[0], sol[1], 0, pr, du, polished=True)

    d, e = _ruiz(p, a)
    ps = d[:, None] * p * d[None, :]
    qs = d * q
    as_ = e[:, None] * a * d[None, :]
    ls = e * l
    us = e * u
    eqs = eq

    def factor(rv):
        return cho_factor(ps + sigma * np.eye(n) + as_.T @ (rv[:, None] * as_))

    rho_vec = np.where(eqs, 1e3 * rho, rho)
    fac = factor(rho_vec)
    x = np.zeros(n)
    z = np.zeros(m)
    y = np.zeros(m)
    prim = dual = np.inf
    for it in range(1, max_iter + 1):
        rhs = sigma * x - qs + as_.T @ (rho_vec * z - y)
        xt = cho_solve(fac, rhs)
        zt = as_ @ xt
        x_new = alpha * xt + (1 - alpha) * x
        z_relax = alpha * zt + (1 - alpha) * z
        z_new = np.clip(z_relax + y / rho_vec, ls, us)
        y_new = y + rho_vec * (z_relax - z_new)
        dy = y_new - y
        x, z, y = x_new, z_new, y_new
        if it % check_every:
            continue

        ax = as_ @ x
        px = ps @ x
        aty = as_.T @ y
        prim_s = np.max(np.abs(ax - z), initial=0.0)
        dual_s = np.max(np.abs(px + qs + aty), initial=0.0)
        # residuals in the unscaled problem
        prim = float(np.max(np.abs((ax - z) / e), initial=0.0))
        dual = float(np.max(np.abs((px + qs + aty) / d), initial=0.0))
        eps_p = eps_abs + eps_rel * max(np.max(np.abs(ax / e), initial=0), np.max(np.abs(z / e), initial=0))
        eps_d = eps_abs + eps_rel * max(
            np.max(np.abs(px / d), initial=0), np.max(np.abs(aty / d), initial=0), np.max(np.abs(q), initial=0)
        )
        if prim <= eps_p and dual <= eps_d:
            return QPResult(SOLVED, d * x, e * y, it, prim, dual)

        ndy = np.max(np.abs(e * dy), initial=0.0)
        if ndy > 1e-12:
            dy_u = e * dy
            cert_a = np.max(np.abs(d * (as_.T @ dy)), initial=0.0) <= 1e-7 * ndy
            u_fin = np.where(np.isfinite(u), u, 0.0)
            l_fin = np.where(np.isfinite(l), l, 0.0)
            pos = np.where(dy_u > 0, np.where(np.isfinite(u), u_fin * dy_u, np.inf), 0.0)
            neg = np.where(dy_u < 0, np.where(np.isfinite(l), l_fin * dy_u, np.inf), 0.0)
            if cert_a and np.sum(pos) + np.sum(neg) < -1e-7 * ndy:
                return QPResult(PRIMAL_INFEASIBLE, None, None, it, prim, dual)

        if polish and prim_s < 1e-3 and dual_s < 1e-3:
            sol = _polish(p, q, a, l, u, d * x, e * y, eq, eps_abs)
            if sol is not None:
                pr, du = kkt_residuals(p, q, a, l, u, *sol)
                if pr <= 10 * eps_abs * max(1.0, np.max(np.abs(u[np.isfinite(u)]), initial=1.0)):
                    return QPResult(SOLVED, sol[0], sol[1], it, pr, du, polished=True)

        # rebalance rho between primal and dual progress
        num = prim_s / max(np.max(np.abs(ax), initial=0), np.max(np.abs(z), initial=0), 1e-12)
        den = dual_s / max(np.max(np.abs(px), initial=0), np.max(np.abs(aty), initial=0),
                           np.max(np.abs(qs), initial=0), 1e-12)
        ratio = np.sqrt(num / max(den, 1e-300))
        new_rho = float(np.clip(rho * ratio, 1e-6, 1e6))
        if new_rho > 5 * rho or new_rho < rho / 5:
            rho = new_rho
            rho_vec = np.where(eqs, 1e3 * rho, rho)
            fac = factor(rho_vec)
    return QPResult(MAX_ITER, d * x, e * y, max_iter, prim, dual)


def is_feasible(a, l, u, n: int) -> bool:
    """Phase-1 linear program: does any ``x`` satisfy ``l <= A x <= u``?"""
    a = np.asarray(a, dtype=float).reshape(-1, n)
    l = np.asarray(l, dtype=float)
    u = np.asarray(u, dtype=float)
    eq = np.isclose(l, u, rtol=0, atol=1e-14)
    rows_ub, rhs_ub = [], []
    fin_u = (~eq) & np.isfinite(u)
    fin_l = (~eq) & np.isfinite(l)
    if fin_u.any():
        rows_ub.append(a[fin_u])
        rhs_ub.append(u[fin_u])
    if fin_l.any():
        rows_ub.append(-a[fin_l])
        rhs_ub.append(-l[fin_l])
    res = linprog(
        np.zeros(n),
        A_ub=np.vstack(rows_ub) if rows_ub else None,
        b_ub=np.concatenate(rhs_ub) if rhs_ub else None,
        A_eq=a[eq] if eq.any() else None,
        b_eq=u[eq] if eq.any() else None,
        bounds=[(None, None)] * n,
        method="highs",
    )
    if res.status == 2:
        return False
    if res.status != 0:
        raise RuntimeError(f"phase-1 LP failed: {res.message}")
    return True
