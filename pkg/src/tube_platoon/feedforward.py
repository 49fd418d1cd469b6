"""Nominal (tube-centre) planning: the constrained feedforward QP.

A plan made at step ``k0`` holds ``e_bar[j]`` and ``u_bar[j]`` for the steps
``k0 + j``, ``j = 0 .. n_p - 1``. ``e_bar[0]`` is the error observed when
planning; ``e_bar[n_p - 1]`` and ``u_bar[n_p - 1]`` are pinned to zero.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dynamics import ModelMatrices, TrackingError
from .qp import MAX_ITER, PRIMAL_INFEASIBLE, is_feasible, kkt_residuals, solve_qp
from .sets import HPolytope2, Interval, Zonotope2

TERMINAL_TOL = 1e-8


class SolverError(RuntimeError):
    """The QP iteration cap was hit on a problem certified feasible."""


@dataclass(frozen=True)
class FeedforwardWeights:
    g: np.ndarray = field(default_factory=lambda: np.eye(2))
    f_w: float = 1.0

    def __post_init__(self):
        g = np.asarray(self.g, dtype=float)
        if g.shape == (2,):
            g = np.diag(g)
        if g.shape != (2, 2) or np.any(np.linalg.eigvalsh(g.T @ g) <= 0):
            raise ValueError("g must be a positive definite 2x2 weight")
        if not self.f_w > 0:
            raise ValueError("f_w must be positive")
        object.__setattr__(self, "g", g)


@dataclass(frozen=True)
class HorizonPolicy:
    n_p_init: int = 50
    n_cap: int = 200
    growth: float = 2.0

    def __post_init__(self):
        if not 1 <= self.n_p_init <= self.n_cap:
            raise ValueError("need 1 <= n_p_init <= n_cap")
        if not self.growth > 1:
            raise ValueError("growth must exceed 1")

    def schedule(self) -> list[int]:
        out = [self.n_p_init]
        while out[-1] < self.n_cap:
            out.append(min(self.n_cap, max(out[-1] + 1, int(round(out[-1] * self.growth)))))
        return out


@dataclass
class TubePlan:
    e_bar: np.ndarray  # (n_p, 2)
    u_bar: np.ndarray  # (n_p,)
    n_p: int
    tube: Zonotope2
    d_bar: np.ndarray  # (n_p, 2) exogenous terms, zero-padded past the prediction
    x_n_bar: np.ndarray  # (n_p, 2) predicted predecessor states
    cost: float = 0.0
    kkt_residual: float = 0.0
    theta: float | None = None

    def error(self, j: int) -> TrackingError:
        return TrackingError.from_array(self.e_bar[j])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "e_s", "e_v", "u"])
        for j in range(self.n_p):
            w.writerow([j, f"{self.e_bar[j, 0]:.9g}", f"{self.e_bar[j, 1]:.9g}", f"{self.u_bar[j]:.9g}"])
        return buf.getvalue()


def predicted_exogenous(x_n_pred, m: ModelMatrices) -> np.ndarray:
    """``d[k] = x_n[k+1] - A x_n[k]`` along a predicted predecessor path."""
    x = np.asarray(x_n_pred, dtype=float).reshape(-1, 2)
    if x.shape[0] < 2:
        raise ValueError("prediction needs at least two states")
    return x[1:] - x[:-1] @ m.a.T


def rollout(e0, u_bar, d_bar, m: ModelMatrices) -> np.ndarray:
    """Planned-error rollout ``e[j+1] = A e[j] + CB u[j] + d[j]``."""
    n = len(u_bar)
    e = np.zeros((n, 2))
    e[0] = np.asarray(e0, dtype=float)
    cb = m.cb
    for j in range(n - 1):
        e[j + 1] = m.a @ e[j] + cb * u_bar[j] + d_bar[j]
    return e


def _sets_for_horizon(tight_e, n: int) -> list[HPolytope2]:
    if isinstance(tight_e, HPolytope2):
        return [tight_e] * n
    sets = list(tight_e)
    if len(sets) < n:
        raise ValueError(f"need {n} constraint sets, got {len(sets)}")
    return sets[:n]


def condensed_qp(e0, d_bar, sets, tight_u: Interval, weights: FeedforwardWeights, n: int, m: ModelMatrices):
    """Stack the plan as ``min 0.5 z'Pz + q'z, l <= Az <= u`` over
    ``z = u_bar[0 .. n-2]`` with the errors eliminated through the rollout."""
    nz = n - 1
    a_pows = [np.eye(2)]
    for _ in range(n):
        a_pows.append(m.a @ a_pows[-1])
    cb = m.cb
    # e[j] = phi[j] @ z + c[j], j = 1 .. n-1
    phi = np.zeros((n, 2, nz))
    c = np.zeros((n, 2))
    c[0] = e0
    for j in range(1, n):
        c[j] = m.a @ c[j - 1] + d_bar[j - 1]
        phi[j] = m.a @ phi[j - 1]
        phi[j, :, j - 1] += cb
    qbar = weights.g.T @ weights.g
    p = 2.0 * weights.f_w**2 * np.eye(nz)
    q = np.zeros(nz)
    for j in range(1, n):
        p += 2.0 * phi[j].T @ qbar @ phi[j]
        q += 2.0 * phi[j].T @ qbar @ c[j]

    rows, lo, hi = [phi[n - 1]], [-c[n - 1]], [-c[n - 1]]
    for j in range(1, n - 1):
        hmat, b = sets[j].normals, sets[j].offsets
        rows.append(hmat @ phi[j])
        lo.append(np.full(len(b), -np.inf))
        hi.append(b - hmat @ c[j])
    rows.append(np.eye(nz))
    lo.append(np.full(nz, tight_u.lo))
    hi.append(np.full(nz, tight_u.hi))
    const = float(sum(c[j] @ qbar @ c[j] for j in range(n)))
    return p, q, np.vstack(rows), np.concatenate(lo), np.concatenate(hi), const


def solve_plan(
    e0,
    x_n_pred,
    tight_e,
    tight_u: Interval,
    weights: FeedforwardWeights,
    horizon: int,
    m: ModelMatrices,
    tube: Zonotope2 | None = None,
) -> TubePlan | None:
    """Plan ``horizon`` steps from ``e0``; ``None`` when infeasible.

    ``tight_e`` is one tightened error set or a per-step sequence (index
    ``j`` constrains ``e_bar[j]``; index 0 is not used because the starting
    error is data). Raises :class:`SolverError` on iteration-cap exhaustion.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    x_pred = np.asarray(x_n_pred, dtype=float).reshape(-1, 2)
    if x_pred.shape[0] < horizon + 1:
        raise ValueError(f"prediction covers {x_pred.shape[0]} states, need {horizon + 1}")
    sets = _sets_for_horizon(tight_e, horizon)
    if any(s.empty for s in sets[1:]) or tight_u.empty:
        return None
    e0 = np.asarray(e0, dtype=float)
    d_bar = predicted_exogenous(x_pred[: horizon + 1], m)
    tube = tube if tube is not None else Zonotope2.point()
    n = horizon

    if not tight_u.contains(0.0, tol=0.0) or not sets[n - 1].contains(np.zeros(2), tol=0.0) and n > 1:
        return None
    if n == 1:
        if np.max(np.abs(e0)) > TERMINAL_TOL:
            return None
        return TubePlan(e0.reshape(1, 2).copy(), np.zeros(1), 1, tube, d_bar[:1].copy(), x_pred[:1].copy())

    p, q, a, lo, hi, const = condensed_qp(e0, d_bar, sets, tight_u, weights, n, m)
    if not is_feasible(a, lo, hi, n - 1):
        return None
    res = solve_qp(p, q, a, lo, hi)
    if res.status == PRIMAL_INFEASIBLE:
        return None
    if res.status == MAX_ITER:
        raise SolverError(
            f"QP hit the iteration cap (horizon {n}, primal {res.prim_res:.2e}, dual {res.dual_res:.2e})"
        )
    u_bar = np.append(res.x, 0.0)
    e_bar = rollout(e0, u_bar, d_bar, m)
    _, dual = kkt_residuals(p, q, a, lo, hi, res.x, res.y)
    cost = const + 0.5 * float(res.x @ p @ res.x) + float(q @ res.x)
    return TubePlan(
        e_bar=e_bar,
        u_bar=u_bar,
        n_p=n,
        tube=tube,
        d_bar=d_bar[:n].copy(),
        x_n_bar=x_pred[:n].copy(),
        cost=cost,
        kkt_residual=dual,
    )


def plan_with_growth(
    e0,
    x_n_pred: Sequence | Callable[[int], Sequence],
    tight_e,
    tight_u: Interval,
    weights: FeedforwardWeights,
    policy: HorizonPolicy,
    m: ModelMatrices,
    tube: Zonotope2 | None = None,
) -> TubePlan | None:
    """First feasible plan along ``n_p_init, growth * n_p_init, ...`` up to
    ``n_cap``; ``None`` if even ``n_cap`` is infeasible.

    ``x_n_pred`` may be a callable returning at least ``horizon + 1`` states.
    """
    for horizon in policy.schedule():
        pred = x_n_pred(horizon + 1) if callable(x_n_pred) else x_n_pred
        sets = tight_e(pred) if callable(tight_e) else tight_e
        plan = solve_plan(e0, pred, sets, tight_u, weights, horizon, m, tube=tube)
        if plan is not None:
            return plan
    return None
