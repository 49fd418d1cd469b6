"""Human-driven vehicles: a discrete Newell follower with truncated-Gaussian
noise, its noiseless prediction, and Monte-Carlo uncertainty bounds.

Follower rule, per HDV behind predecessor ``p`` at step ``k``::

    u = (v_p - v) / tau + gain * r / (0.5 tau^2)
    r = (s_p - s0 - (h - tau) v_p) - (s + tau (v + v_p) / 2)

The first term hands the predecessor's current speed to the follower one
step later (the kinematic-wave delay of one step); ``r`` is the shortfall of
the next position against the equilibrium gap ``s0 + h v``. ``u`` is clipped
to ``[-u_max, u_max]``, then the position and speed receive additive noise
and the speed is clamped to ``[v_min, v_max]``.

Noise streams use numpy's Philox generator. In chain simulation the draw for
vehicle ``i`` at step ``k`` comes from ``key = (seed, chain_id)``,
``counter = (0, 0, i, k)``: first the position perturbation, then the speed
perturbation, each by rejection from the untruncated Gaussian. Monte-Carlo
estimation uses one stream per call keyed by ``(seed, chain_len)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import ModelMatrices, VehicleState
from .sets import Box2

V_EQ_DEFAULT = 20.0
MC_HORIZON = 50


@dataclass(frozen=True)
class HdvNoise:
    sigma_s: float = 0.1
    sigma_v: float = 0.1
    trunc_s: float = 1.0
    trunc_v: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma_s < 0 or self.sigma_v < 0:
            raise ValueError("noise sigmas must be >= 0")
        if not (self.trunc_s > 0 and self.trunc_v > 0):
            raise ValueError("truncation widths must be positive")

    @property
    def silent(self) -> bool:
        return self.sigma_s == 0 and self.sigma_v == 0

    def with_seed(self, seed: int) -> "HdvNoise":
        return HdvNoise(self.sigma_s, self.sigma_v, self.trunc_s, self.trunc_v, seed)


@dataclass(frozen=True)
class HdvParams:
    """Newell follower parameters (jam gap ``s0`` in m, spacing gain)."""

    s0: float = 2.0
    gain: float = 0.1
    v_min: float = 0.0
    v_max: float = 50.0
    u_max: float = 5.0

    def gap(self, v, m: ModelMatrices):
        return self.s0 + m.h * v


@dataclass(frozen=True)
class HdvChain:
    """Consecutive HDVs, front to back; ``states`` has shape ``(count, 2)``."""

    states: np.ndarray
    params: HdvParams = field(default_factory=HdvParams)
    chain_id: int = 0

    def __post_init__(self):
        x = np.asarray(self.states, dtype=float).reshape(-1, 2)
        if x.shape[0] < 1:
            raise ValueError("a chain needs at least one vehicle")
        x.setflags(write=False)
        object.__setattr__(self, "states", x)

    @property
    def count(self) -> int:
        return self.states.shape[0]

    @property
    def rear(self) -> VehicleState:
        return VehicleState.from_array(self.states[-1])

    @classmethod
    def at_equilibrium(cls, leader: VehicleState, count: int, m: ModelMatrices,
                       params: HdvParams = HdvParams(), chain_id: int = 0) -> "HdvChain":
        gap = params.gap(leader.v, m)
        s = leader.s - gap * np.arange(1, count + 1)
        return cls(np.column_stack([s, np.full(count, leader.v)]), params, chain_id)


@dataclass
class UncertaintyEstimate:
    """Box ``bound`` covering a fraction ``theta`` of the sampled per-step
    prediction errors; ``deviations`` keeps the samples (shape ``(samples, 2)``)."""

    bound: Box2
    theta: float
    samples: int
    deviations: np.ndarray | None = field(default=None, repr=False)

    def bound_at(self, theta: float) -> Box2:
        """Re-derive the box at another coverage level from the stored samples."""
        if theta <= 0 or self.bound.is_zero:
            return Box2((0.0, 0.0))
        if self.deviations is None:
            raise ValueError("no samples stored; cannot re-derive the bound")
        if theta >= 1:
            return Box2(tuple(np.abs(self.deviations).max(axis=0)))
        return _quantile_box(self.deviations, theta)


def truncated_normal(rng: np.random.Generator, sigma: float, trunc: float, size=None):
    """Rejection sampling from ``N(0, sigma^2)`` restricted to ``[-trunc, trunc]``."""
    if sigma == 0:
        return np.zeros(size) if size is not None else 0.0
    x = np.atleast_1d(rng.normal(0.0, sigma, size))
    bad = np.abs(x) > trunc
    while bad.any():
        x[bad] = rng.normal(0.0, sigma, int(bad.sum()))
        bad = np.abs(x) > trunc
    return x if size is not None else float(x[0])


def _vehicle_rng(seed: int, chain_id: int, vehicle: int, step: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, chain_id], counter=[0, 0, vehicle, step]))


def newell_accel(s, v, s_p, v_p, params: HdvParams, m: ModelMatrices):
    """Acceleration of followers at ``(s, v)`` behind predecessors ``(s_p, v_p)``."""
    tau = m.tau
    r = (s_p - params.s0 - (m.h - tau) * v_p) - (s + tau * (v + v_p) / 2)
    u = (v_p - v) / tau + params.gain * r / (0.5 * tau * tau)
    return np.clip(u, -params.u_max, params.u_max)


def _advance(states, leader, params: HdvParams, m: ModelMatrices):
    """Noiseless update of a ``(..., count, 2)`` chain behind ``leader (..., 2)``."""
    preds = np.concatenate([leader[..., None, :], states[..., :-1, :]], axis=-2)
    s, v = states[..., 0], states[..., 1]
    u = newell_accel(s, v, preds[..., 0], preds[..., 1], params, m)
    out = np.empty_like(states)
    out[..., 0] = s + m.tau * v + 0.5 * m.tau**2 * u
    out[..., 1] = v + m.tau * u
    return out


def step_hdv_chain(chain: HdvChain, leader: VehicleState, noise: HdvNoise | None,
                   m: ModelMatrices, step: int = 0) -> HdvChain:
    """Advance every HDV one step; each reacts to its predecessor's state at
    the current step (the leader for the first HDV)."""
    p = chain.params
    nxt = _advance(chain.states, np.asarray(leader, dtype=float), p, m)
    if noise is not None and not noise.silent:
        for i in range(chain.count):
            rng = _vehicle_rng(noise.seed, chain.chain_id, i, step)
            nxt[i, 0] += truncated_normal(rng, noise.sigma_s, noise.trunc_s)
            nxt[i, 1] += truncated_normal(rng, noise.sigma_v, noise.trunc_v)
    nxt[:, 1] = np.clip(nxt[:, 1], p.v_min, p.v_max)
    return HdvChain(nxt, p, chain.chain_id)


def predict_hdv_chain(chain: HdvChain, leader_plan, horizon: int, m: ModelMatrices) -> np.ndarray:
    """Noiseless prediction of the rearmost HDV.

    ``leader_plan[j]`` is the leader state at step ``j`` from now (at least
    ``horizon`` rows). Returns ``horizon + 1`` rows: the current rear state,
    then the predicted states one to ``horizon`` steps ahead.
    """
    plan = np.asarray(leader_plan, dtype=float).reshape(-1, 2)
    if plan.shape[0] < horizon:
        raise ValueError(f"leader plan has {plan.shape[0]} states, need {horizon}")
    out = np.empty((horizon + 1, 2))
    out[0] = chain.states[-1]
    c = chain
    for j in range(horizon):
        c = step_hdv_chain(c, VehicleState.from_array(plan[j]), None, m)
        out[j + 1] = c.states[-1]
    return out


def sample_deviations(chain_len: int, noise: HdvNoise, runs: int, m: ModelMatrices,
                      params: HdvParams = HdvParams(), horizon: int = MC_HORIZON,
                      v_eq: float = V_EQ_DEFAULT) -> np.ndarray:
    """Per-step prediction errors of the rearmost HDV, pooled over runs.

    Every run starts at equilibrium behind a noiseless constant-speed
    leader, so the noiseless prediction is constant-speed travel and the
    error at step ``k`` is ``x_n(k+1) - A x_n(k)``. Returns ``(runs*horizon, 2)``.
    """
    if chain_len == 0 or noise.silent:
        return np.zeros((runs * horizon, 2))
    rng = np.random.Generator(np.random.Philox(key=[noise.seed, chain_len]))
    gap = params.gap(v_eq, m)
    x = np.zeros((runs, chain_len, 2))
    x[:, :, 0] = -gap * np.arange(1, chain_len + 1)
    x[:, :, 1] = v_eq
    leader = np.zeros((runs, 2))
    leader[:, 1] = v_eq
    out = np.empty((horizon, runs, 2))
    for k in range(horizon):
        nxt = _advance(x, leader, params, m)
        nxt[..., 0] += truncated_normal(rng, noise.sigma_s, noise.trunc_s, (runs, chain_len))
        nxt[..., 1] += truncated_normal(rng, noise.sigma_v, noise.trunc_v, (runs, chain_len))
        nxt[..., 1] = np.clip(nxt[..., 1], params.v_min, params.v_max)
        out[k] = nxt[:, -1] - x[:, -1] @ m.a.T
        x = nxt
        leader = leader @ m.a.T
    return out.reshape(-1, 2)


def _quantile_box(dev: np.ndarray, theta: float) -> Box2:
    """Smallest scaling of the per-axis ``theta``-quantile box covering at
    least a fraction ``theta`` of the samples."""
    a = np.abs(dev)
    q = np.quantile(a, theta, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(q > 0, a / np.where(q > 0, q, 1.0), np.where(a > 0, np.inf, 0.0))
    score = ratio.max(axis=1)
    # order statistic: the ceil(theta * n)-th smallest score
    idx = max(int(np.ceil(theta * len(score))) - 1, 0)
    scale = float(np.partition(score, idx)[idx])
    if not np.isfinite(scale):
        raise ValueError("theta too large for the sampled errors")
    return Box2(tuple(q * scale))


def coverage(dev: np.ndarray, bound: Box2) -> float:
    w = np.asarray(bound.half_widths)
    return float(np.mean(np.all(np.abs(dev) <= w, axis=1)))


def estimate_bound_for_theta(chain_len: int, noise: HdvNoise, theta: float, runs: int,
                             m: ModelMatrices, params: HdvParams = HdvParams(),
                             horizon: int = MC_HORIZON) -> UncertaintyEstimate:
    """Monte-Carlo bound ``W_theta`` for the rearmost of ``chain_len`` HDVs.

    The box keeps the aspect ratio of the per-axis ``theta``-quantiles of
    ``|ds|`` and ``|dv|`` and is scaled to the smallest size whose joint
    coverage reaches ``theta``.
    """
    if not 0 < theta < 1:
        raise ValueError("theta must lie in (0, 1)")
    if runs < 1000:
        raise ValueError("runs must be >= 1000")
    if chain_len < 0:
        raise ValueError("chain_len must be >= 0")
    dev = sample_deviations(chain_len, noise, runs, m, params, horizon)
    if not np.any(dev):
        return UncertaintyEstimate(Box2((0.0, 0.0)), 1.0, len(dev), dev)
    box = _quantile_box(dev, theta)
    return UncertaintyEstimate(box, coverage(dev, box), len(dev), dev)


def measure_theta_for_bound(chain_len: int, noise: HdvNoise, bound: Box2, runs: int,
                            m: ModelMatrices, params: HdvParams = HdvParams(),
                            horizon: int = MC_HORIZON) -> float:
    """Fraction of sampled per-step prediction errors inside ``bound``."""
    if runs < 1000:
        raise ValueError("runs must be >= 1000")
    return coverage(sample_deviations(chain_len, noise, runs, m, params, horizon), bound)
