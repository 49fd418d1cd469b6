"""Discrete longitudinal vehicle model and tracking-error bookkeeping.

All quantities are SI: positions in m, speeds in m/s, accelerations in
m/s^2 and times in s.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

TAU_DEFAULT = 0.5
HEADWAY_DEFAULT = 0.5


class VehicleState(NamedTuple):
    """Position ``s`` (m) and speed ``v`` (m/s) of one vehicle."""

    s: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.v], dtype=float)

    @classmethod
    def from_array(cls, x) -> "VehicleState":
        return cls(float(x[0]), float(x[1]))


class TrackingError(NamedTuple):
    """Spacing error ``e_s`` (m) and speed error ``e_v`` (m/s).

    The same shape is used for the actual error, the planned error and the
    deviation between the two.
    """

    e_s: float
    e_v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.e_s, self.e_v], dtype=float)

    @classmethod
    def from_array(cls, e) -> "TrackingError":
        return cls(float(e[0]), float(e[1]))


@dataclass(frozen=True)
class ModelMatrices:
    """Double-integrator model sampled with step ``tau`` and headway ``h``.

    The matrices are stored rather than derived on access so that tests can
    build perturbed models with :meth:`with_matrices`.
    """

    tau: float = TAU_DEFAULT
    h: float = HEADWAY_DEFAULT
    a: np.ndarray = field(default=None, repr=False)
    b: np.ndarray = field(default=None, repr=False)
    c: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.h > 0:
            raise ValueError(f"h must be positive, got {self.h}")
        tau, h = float(self.tau), float(self.h)
        if self.a is None:
            object.__setattr__(self, "a", np.array([[1.0, tau], [0.0, 1.0]]))
        if self.b is None:
            object.__setattr__(self, "b", np.array([0.5 * tau * tau, tau]))
        if self.c is None:
            object.__setattr__(self, "c", np.array([[-1.0, -h], [0.0, -1.0]]))
        for name in ("a", "b", "c"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def cb(self) -> np.ndarray:
        """Input column of the error dynamics, ``C @ B``."""
        return self.c @ self.b

    def with_matrices(self, a=None, b=None, c=None) -> "ModelMatrices":
        return ModelMatrices(
            tau=self.tau,
            h=self.h,
            a=self.a if a is None else a,
            b=self.b if b is None else b,
            c=self.c if c is None else c,
        )


def step_vehicle(x: VehicleState, u: float, m: ModelMatrices) -> VehicleState:
    """Advance one vehicle by one step: ``A x + B u``."""
    return VehicleState.from_array(m.a @ np.asarray(x, dtype=float) + m.b * u)


def tracking_error(x_n: VehicleState, x_f: VehicleState, m: ModelMatrices) -> TrackingError:
    """Error of follower ``x_f`` behind ``x_n`` under constant time headway.

    ``e_s = s_n - s_f - h v_f`` and ``e_v = v_n - v_f``.
    """
    e = np.asarray(x_n, dtype=float) + m.c @ np.asarray(x_f, dtype=float)
    return TrackingError.from_array(e)


def step_error_deviation(
    e_dev: TrackingError, u_dev: float, w, m: ModelMatrices
) -> TrackingError:
    """One step of the deviation dynamics ``A e + CB u + w``."""
    nxt = m.a @ np.asarray(e_dev, dtype=float) + m.cb * u_dev + np.asarray(w, dtype=float)
    return TrackingError.from_array(nxt)


def exogenous_term(x_now, x_next, m: ModelMatrices) -> np.ndarray:
    """``x_next - A x_now``: the part of a predecessor's motion not explained by
    constant-speed travel. Zero for a vehicle cruising at constant speed."""
    return np.asarray(x_next, dtype=float) - m.a @ np.asarray(x_now, dtype=float)
