"""Infinite-horizon discrete LQR for the error system ``(A, CB)``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import ModelMatrices
from .sets import spectral_radius


class DareError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


class UnstableGainError(RuntimeError):
    pass


@dataclass(frozen=True)
class LqrWeights:
    q: float = 1.0
    l: float = 1.0  # noqa: E741 - speed-error weight
    r: float = 1.0

    def __post_init__(self):
        if self.q < 0 or self.l < 0:
            raise ValueError("state weights must be >= 0")
        if not self.q + self.l > 0:
            raise ValueError("q + l must be positive")
        if not self.r > 0:
            raise ValueError("r must be positive")


@dataclass(frozen=True)
class FeedbackGain:
    """Row gain ``k`` with ``u = k e`` and closed loop ``a_k = A + CB k``."""

    k: np.ndarray
    a_k: np.ndarray

    @property
    def spectral_radius(self) -> float:
        return spectral_radius(self.a_k)

    def apply(self, e) -> float:
        return float(self.k @ np.asarray(e, dtype=float))


def riccati_residual(a, b, q, r, p) -> float:
    a, b, q, p = (np.atleast_2d(np.asarray(x, dtype=float)) for x in (a, b, q, p))
    b = b.reshape(a.shape[0], -1)
    r = np.atleast_2d(np.asarray(r, dtype=float))
    bp = b.T @ p
    rhs = a.T @ p @ a - a.T @ p @ b @ np.linalg.solve(r + bp @ b, bp @ a) + q
    return float(np.max(np.abs(p - rhs)))


def solve_dare(a, b, state_cost, input_cost, tol: float = 1e-12, max_iter: int = 100_000):
    """Stabilising solution of the discrete algebraic Riccati equation.

    Iterates the Riccati recursion from ``P = state_cost`` until two iterates
    differ by at most ``tol`` (max-abs), then reports the fixed-point
    residual. Raises :class:`DareError` when ``max_iter`` is hit.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    n = a.shape[0]
    b = np.asarray(b, dtype=float).reshape(n, -1)
    q = np.atleast_2d(np.asarray(state_cost, dtype=float))
    r = np.atleast_2d(np.asarray(input_cost, dtype=float))
    if tol <= 0:
        raise ValueError("tol must be positive")

    p = q.copy()
    step = np.inf
    for _ in range(max_iter):
        bp = b.T @ p
        # divergence shows up as a non-finite step and is reported below
        with np.errstate(over="ignore", invalid="ignore"):
            nxt = a.T @ p @ a - a.T @ p @ b @ np.linalg.solve(r + bp @ b, bp @ a) + q
            nxt = 0.5 * (nxt + nxt.T)
            step = float(np.max(np.abs(nxt - p)))
        p = nxt
        if not np.isfinite(step):
            raise DareError("Riccati iteration diverged", step)
        if step <= tol:
            break
    else:
        raise DareError(f"Riccati iteration did not converge in {max_iter} steps", step)
    if riccati_residual(a, b, q, r, p) > max(tol, 1e3 * np.finfo(float).eps * max(1.0, np.max(np.abs(p)))):
        raise DareError("Riccati fixed point not reached", riccati_residual(a, b, q, r, p))
    return p


def synthesize_gain(m: ModelMatrices, w: LqrWeights = LqrWeights()) -> FeedbackGain:
    """LQR feedback for the deviation dynamics ``e+ = A e + CB u + w``.

    The standard gain ``(R + B'PB)^-1 B'PA`` enters as ``u = -K_std e``; it is
    negated here so that callers use ``u = k e`` and ``a_k = A + CB k``.
    """
    cb = m.cb.reshape(2, 1)
    p = solve_dare(m.a, cb, np.diag([w.q, w.l]), w.r)
    k_std = np.linalg.solve(np.atleast_2d(w.r) + cb.T @ p @ cb, cb.T @ p @ m.a)
    k = -k_std.reshape(2)
    a_k = m.a + cb @ k.reshape(1, 2)
    rho = spectral_radius(a_k)
    if rho >= 1.0:
        raise UnstableGainError(f"closed loop not Schur stable (spectral radius {rho:.6g})")
    k.setflags(write=False)
    a_k.setflags(write=False)
    return FeedbackGain(k, a_k)
