"""Planar set algebra: boxes, zonotopes, H-polytopes and intervals.

Zonotopes carry the disturbance images and the invariant tube; the
constraint sets are H-polytopes. Minkowski sums of zonotopes and support
functions stay closed form, so no vertex enumeration happens on the hot
path. Vertex enumeration exists for plotting dumps and test oracles only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

DEFAULT_MEMBERSHIP_TOL = 1e-9
VERIFY_DIRECTIONS = 64


class EmptySetError(ValueError):
    pass


class MrpiError(RuntimeError):
    pass


def _as_vec2(x) -> np.ndarray:
    arr = np.asarray(x, dtype=float).reshape(-1)
    if arr.shape != (2,):
        raise ValueError(f"expected a 2-vector, got shape {arr.shape}")
    return arr


def unit_directions(count: int = VERIFY_DIRECTIONS) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(count) / count
    return np.column_stack([np.cos(angles), np.sin(angles)])


@dataclass(frozen=True)
class Box2:
    """Origin-centred axis-aligned box ``|x_s| <= w_s, |x_v| <= w_v``."""

    half_widths: tuple[float, float]
    empty: bool = False

    def __post_init__(self):
        w = tuple(float(x) for x in self.half_widths)
        if len(w) != 2:
            raise ValueError("Box2 needs two half-widths")
        if not self.empty and (min(w) < 0 or not all(math.isfinite(x) for x in w)):
            raise ValueError(f"half-widths must be finite and >= 0, got {w}")
        object.__setattr__(self, "half_widths", w)

    @classmethod
    def square(cls, width: float) -> "Box2":
        return cls((width, width))

    @property
    def ws(self) -> float:
        return self.half_widths[0]

    @property
    def wv(self) -> float:
        return self.half_widths[1]

    @property
    def is_zero(self) -> bool:
        return self.half_widths == (0.0, 0.0)

    def contains(self, x, tol: float = 0.0) -> bool:
        x = _as_vec2(x)
        return bool(np.all(np.abs(x) <= np.asarray(self.half_widths) + tol))

    def clip(self, x) -> np.ndarray:
        w = np.asarray(self.half_widths)
        return np.clip(_as_vec2(x), -w, w)

    def to_zonotope(self) -> "Zonotope2":
        return Zonotope2(np.zeros(2), np.diag(self.half_widths))


@dataclass(frozen=True)
class Zonotope2:
    """``{c + G^T xi : |xi|_inf <= 1}`` with generators stored as rows of G."""

    center: np.ndarray
    generators: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        c = _as_vec2(self.center)
        g = np.asarray(self.generators, dtype=float).reshape(-1, 2)
        c.setflags(write=False)
        g.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "generators", g)

    @classmethod
    def point(cls, x=(0.0, 0.0)) -> "Zonotope2":
        return cls(_as_vec2(x))

    @property
    def order(self) -> int:
        return self.generators.shape[0]

    def scaled(self, factor: float) -> "Zonotope2":
        """Scale about the origin."""
        return Zonotope2(self.center * factor, self.generators * factor)

    def support_many(self, directions) -> np.ndarray:
        d = np.asarray(directions, dtype=float).reshape(-1, 2)
        return d @ self.center + np.abs(d @ self.generators.T).sum(axis=1)

    def radius_inf(self) -> float:
        """Smallest r with the set inside the infinity-norm ball of radius r."""
        axes = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        return float(np.max(self.support_many(axes)))

    def vertices(self) -> np.ndarray:
        return zonotope_vertices(self)

    def to_json(self) -> str:
        return json.dumps(self.vertices().tolist())


@dataclass(frozen=True)
class HPolytope2:
    """``{x : normals @ x <= offsets}``; ``empty`` marks a known-empty result."""

    normals: np.ndarray
    offsets: np.ndarray
    empty: bool = False

    def __post_init__(self):
        n = np.asarray(self.normals, dtype=float).reshape(-1, 2)
        b = np.asarray(self.offsets, dtype=float).reshape(-1)
        if n.shape[0] != b.shape[0]:
            raise ValueError("normals and offsets disagree in length")
        if np.any(np.linalg.norm(n, axis=1) == 0):
            raise ValueError("zero normal row")
        n.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "normals", n)
        object.__setattr__(self, "offsets", b)

    @classmethod
    def from_rows(cls, rows) -> "HPolytope2":
        rows = list(rows)
        return cls([r[0] for r in rows], [r[1] for r in rows])

    @classmethod
    def box(cls, lo, hi) -> "HPolytope2":
        lo, hi = _as_vec2(lo), _as_vec2(hi)
        normals = [[1, 0], [-1, 0], [0, 1], [0, -1]]
        return cls(normals, [hi[0], -lo[0], hi[1], -lo[1]])

    @property
    def rows(self):
        return list(zip(map(tuple, self.normals), self.offsets))

    def contains(self, x, tol: float = DEFAULT_MEMBERSHIP_TOL) -> bool:
        if self.empty:
            return False
        x = _as_vec2(x)
        scale = np.linalg.norm(self.normals, axis=1)
        return bool(np.all(self.normals @ x <= self.offsets + tol * scale))

    def slack(self, x) -> np.ndarray:
        return self.offsets - self.normals @ _as_vec2(x)

    def chebyshev(self) -> tuple[np.ndarray, float]:
        """Centre and radius of the largest inscribed disc.

        The radius is negative when the rows have no common point; it is
        ``inf`` for an unbounded region.
        """
        norms = np.linalg.norm(self.normals, axis=1)
        a_ub = np.column_stack([self.normals, norms])
        res = linprog(
            c=[0.0, 0.0, -1.0],
            A_ub=a_ub,
            b_ub=self.offsets,
            bounds=[(None, None), (None, None), (None, 1e9)],
            method="highs",
        )
        if res.status != 0:
            raise RuntimeError(f"Chebyshev LP failed: {res.message}")
        return res.x[:2], float(res.x[2])

    def is_empty(self, tol: float = 1e-12) -> bool:
        if self.empty:
            return True
        box = self._axis_bounds()
        if box is not None:
            lo, hi = box
            return bool(np.any(hi - lo < -2 * tol))
        _, r = self.chebyshev()
        return r < -tol

    def _axis_bounds(self):
        """``(lo, hi)`` when every row is an axis direction, else ``None``."""
        unit = self.normals / np.linalg.norm(self.normals, axis=1)[:, None]
        if not np.all(np.isclose(np.abs(unit), 1.0, atol=0) | (unit == 0)):
            return None
        b = self.offsets / np.linalg.norm(self.normals, axis=1)
        lo, hi = np.full(2, -np.inf), np.full(2, np.inf)
        for n, off in zip(unit, b):
            i = int(np.argmax(np.abs(n)))
            if n[i] > 0:
                hi[i] = min(hi[i], off)
            else:
                lo[i] = max(lo[i], -off)
        return lo, hi

    def vertices(self) -> np.ndarray:
        """Vertices in counter-clockwise order (bounded, nonempty sets only)."""
        if self.empty:
            return np.zeros((0, 2))
        pts = []
        k = len(self.offsets)
        for i in range(k):
            for j in range(i + 1, k):
                mat = self.normals[[i, j]]
                if abs(np.linalg.det(mat)) < 1e-12:
                    continue
                p = np.linalg.solve(mat, self.offsets[[i, j]])
                if self.contains(p, tol=1e-9):
                    pts.append(p)
        if not pts:
            return np.zeros((0, 2))
        return _ccw_unique(np.array(pts))


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    @property
    def empty(self) -> bool:
        return self.lo > self.hi

    def contains(self, u: float, tol: float = DEFAULT_MEMBERSHIP_TOL) -> bool:
        return self.lo - tol <= u <= self.hi + tol


@dataclass(frozen=True)
class MrpiParams:
    epsilon: float = 1e-3
    s_max: int = 4096

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.s_max < 1:
            raise ValueError("s_max must be >= 1")


@dataclass(frozen=True)
class MrpiResult:
    tube: Zonotope2
    partial_sum: Zonotope2
    s: int
    alpha: float


def _ccw_unique(pts: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Convex-position points sorted counter-clockwise, duplicates and
    collinear interior points dropped."""
    centroid = pts.mean(axis=0)
    ang = np.arctan2(pts[:, 1] - centroid[1], pts[:, 0] - centroid[0])
    pts = pts[np.argsort(ang, kind="stable")]
    keep = []
    for p in pts:
        if not keep or np.linalg.norm(p - keep[-1]) > 1e-10:
            keep.append(p)
    if len(keep) > 1 and np.linalg.norm(keep[0] - keep[-1]) <= 1e-10:
        keep.pop()
    if len(keep) < 3:
        return np.array(keep)
    out = []
    n = len(keep)
    for i in range(n):
        prev, cur, nxt = keep[i - 1], keep[i], keep[(i + 1) % n]
        cross = (cur[0] - prev[0]) * (nxt[1] - cur[1]) - (cur[1] - prev[1]) * (nxt[0] - cur[0])
        if abs(cross) > tol:
            out.append(cur)
    return np.array(out)


def zonotope_vertices(z: Zonotope2) -> np.ndarray:
    """Vertices of a planar zonotope, counter-clockwise."""
    g = z.generators[np.linalg.norm(z.generators, axis=1) > 0]
    if g.shape[0] == 0:
        return z.center.reshape(1, 2).copy()
    # fold every generator into the upper half-plane, then walk by angle
    flip = (g[:, 1] < 0) | ((g[:, 1] == 0) & (g[:, 0] < 0))
    g = np.where(flip[:, None], -g, g)
    g = g[np.argsort(np.arctan2(g[:, 1], g[:, 0]), kind="stable")]
    start = z.center - g.sum(axis=0)
    steps = np.vstack([2 * g, -2 * g])
    pts = start + np.vstack([np.zeros(2), np.cumsum(steps, axis=0)[:-1]])
    return _ccw_unique(pts)


def support(z: Zonotope2, a) -> float:
    """Support function ``max_{x in z} a.x = a.c + sum_j |a.g_j|``."""
    a = _as_vec2(a)
    if not np.all(np.isfinite(a)) or not np.any(a):
        raise ValueError("support direction must be finite and nonzero")
    return float(a @ z.center + np.abs(z.generators @ a).sum())


def minkowski_sum(z1: Zonotope2, z2: Zonotope2) -> Zonotope2:
    return Zonotope2(z1.center + z2.center, np.vstack([z1.generators, z2.generators]))


def linear_image(mat, z: Zonotope2) -> Zonotope2:
    mat = np.asarray(mat, dtype=float)
    return Zonotope2(mat @ z.center, z.generators @ mat.T)


def pontryagin_diff(p: HPolytope2, z: Zonotope2) -> HPolytope2:
    """``p (-) z``: every offset shrinks by the support of ``z`` along its row.

    The result carries ``empty=True`` when no point survives.
    """
    if p.empty:
        raise EmptySetError("cannot subtract from an empty polytope")
    shrink = z.support_many(p.normals)
    out = HPolytope2(p.normals, p.offsets - shrink)
    if out.is_empty():
        return HPolytope2(out.normals, out.offsets, empty=True)
    return out


def interval_pontryagin_diff(u: Interval, row_gain, z: Zonotope2) -> Interval:
    """``U (-) K Z`` for a 1-D interval and a row gain ``K``."""
    k = _as_vec2(row_gain)
    if not np.any(k):
        return u
    return Interval(u.lo + float(z.support_many(-k)[0]), u.hi - float(z.support_many(k)[0]))


def _facet_normals(z: Zonotope2) -> np.ndarray:
    g = z.generators[np.linalg.norm(z.generators, axis=1) > 0]
    axes = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    if g.shape[0] == 0:
        return axes
    perp = np.column_stack([-g[:, 1], g[:, 0]])
    perp /= np.linalg.norm(perp, axis=1, keepdims=True)
    along = g / np.linalg.norm(g, axis=1, keepdims=True)
    return np.vstack([perp, -perp, along, -along, axes])


def contains(z: Zonotope2, x, tol: float = DEFAULT_MEMBERSHIP_TOL) -> bool:
    """Membership test of ``x`` in ``z`` inflated by ``tol``.

    Checked against the facet normals (perpendiculars of the generators);
    generator directions and the axes are added so that flat zonotopes are
    handled too.
    """
    if tol < 0:
        raise ValueError("tol must be >= 0")
    x = _as_vec2(x)
    normals = _facet_normals(z)
    return bool(np.all(normals @ x <= z.support_many(normals) + tol))


def spectral_radius(mat) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(np.asarray(mat, dtype=float)))))


def partial_sum(a_k, w: Box2, s: int) -> Zonotope2:
    """``F_s = W (+) A W (+) ... (+) A^(s-1) W`` with ``F_0 = {0}``."""
    a_k = np.asarray(a_k, dtype=float)
    base = w.to_zonotope()
    gens = []
    power = np.eye(2)
    for _ in range(s):
        gens.append(base.generators @ power.T)
        power = a_k @ power
    if not gens:
        return Zonotope2.point()
    return Zonotope2(np.zeros(2), np.vstack(gens))


def mrpi_result(a_k, w: Box2, params: MrpiParams = MrpiParams()) -> MrpiResult:
    """Outer epsilon-approximation of the minimal robust positively invariant
    set of ``x+ = a_k x + d``, ``d in w``.

    Doubles ``s`` until ``A^s W`` fits inside ``alpha W`` with
    ``alpha / (1 - alpha) * radius(F_s) <= epsilon`` and returns
    ``F_s / (1 - alpha)``.
    """
    a_k = np.asarray(a_k, dtype=float)
    if w.empty:
        raise EmptySetError("disturbance box is empty")
    rho = spectral_radius(a_k)
    if rho >= 1.0:
        raise MrpiError(f"closed loop is not Schur stable (spectral radius {rho:.6g})")
    if w.is_zero:
        origin = Zonotope2.point()
        return MrpiResult(origin, origin, 0, 0.0)
    widths = np.asarray(w.half_widths)
    if np.any(widths == 0):
        # flat boxes have no interior; inflate so the contraction test is defined
        widths = np.where(widths == 0, params.epsilon * 1e-6, widths)
        w = Box2(tuple(widths))

    s = 1
    while True:
        power = np.linalg.matrix_power(a_k, s)
        image = linear_image(power, w.to_zonotope())
        axes = np.array([[1.0, 0.0], [0.0, 1.0]])
        alpha = float(np.max(image.support_many(axes) / widths))
        if alpha < 1.0:
            fs = partial_sum(a_k, w, s)
            if alpha / (1.0 - alpha) * fs.radius_inf() <= params.epsilon:
                return MrpiResult(fs.scaled(1.0 / (1.0 - alpha)), fs, s, alpha)
        if s >= params.s_max:
            raise MrpiError(
                f"no epsilon={params.epsilon:g} approximation within s_max={params.s_max} "
                f"(last alpha {alpha:.3g})"
            )
        s = min(2 * s, params.s_max)


def compute_mrpi(a_k, w: Box2, params: MrpiParams = MrpiParams()) -> Zonotope2:
    return mrpi_result(a_k, w, params).tube


def is_rpi(a_k, w: Box2, z: Zonotope2, tol: float, directions: int = VERIFY_DIRECTIONS) -> bool:
    """Support-function check of ``A Z (+) W subset Z`` on a direction grid."""
    d = unit_directions(directions)
    lhs = minkowski_sum(linear_image(a_k, z), w.to_zonotope()).support_many(d)
    return bool(np.all(lhs <= z.support_many(d) + tol))
