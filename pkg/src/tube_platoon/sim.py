"""Mixed-platoon scenarios: leader disturbances, HDV segments, CAV controllers.

A platoon is a leader (the p-CAV) followed by segments, each a run of HDVs
closed by one CAV. ``P1`` is one segment, ``P2`` two, and ``chain`` places
CAVs periodically in a long string.

Within a step the vehicles are processed front to back, so a CAV sees the
plan its predecessor CAV made at the same step. Disturbances are speed jumps
of the leader, which then replans its return to the equilibrium reference.
"""

from __future__ import annotations

import concurrent.futures as cf
import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .controller import (
    ConstraintSpec,
    ControllerConfig,
    HardInfeasibilityError,
    Mode,
    PerStepMpc,
    StringStabilitySpec,
    TubeController,
)
from .dynamics import ModelMatrices, VehicleState, step_vehicle, tracking_error
from .feedforward import FeedforwardWeights, HorizonPolicy, solve_plan
from .hdv import (
    HdvChain,
    HdvNoise,
    HdvParams,
    UncertaintyEstimate,
    estimate_bound_for_theta,
    newell_accel,
    step_hdv_chain,
    predict_hdv_chain,
)
from .lqr import LqrWeights
from .sets import Box2, HPolytope2, MrpiParams, compute_mrpi, contains

THREADS_ENV = "TUBE_PLATOON_THREADS"
LEADER_ES_LIMIT = 1e3


class ConfigError(ValueError):
    """Invalid scenario configuration; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class PlatoonSpec:
    kind: str = "P1"
    n: int = 5
    n1: int = 3
    n2: int = 3
    length: int = 100
    penetration: float = 0.1

    def segments(self) -> list[int]:
        """HDV count ahead of each CAV, front to back."""
        if self.kind == "P1":
            return [self.n]
        if self.kind == "P2":
            return [self.n1, self.n2]
        period = int(round(1.0 / self.penetration))
        return [period - 1] * (self.length // period)


@dataclass(frozen=True)
class DisturbanceSpec:
    kind: str = "single"
    speed_jump: float = -5.0
    lam: float = 10.0  # mean inter-arrival time in seconds
    jump_range: tuple[float, float] = (-5.0, 5.0)


@dataclass(frozen=True)
class ScenarioConfig:
    tau: float = 0.5
    h: float = 0.5
    steps: int = 150
    equilibrium_speed: float = 20.0
    seed: int = 0
    platoon: PlatoonSpec = field(default_factory=PlatoonSpec)
    disturbance: DisturbanceSpec = field(default_factory=DisturbanceSpec)
    noise: HdvNoise = field(default_factory=HdvNoise)
    hdv: HdvParams = field(default_factory=HdvParams)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    baseline: str = "tube"
    leader_horizon: int = 40
    uncertainty_runs: int = 1000
    uncertainty_seed: int = 12345
    # hard regime: clip each n-HDV increment into the tube's bound
    clip_to_bound: bool = False
    # HDV noise only on steps < noise_steps (None: always)
    noise_steps: int | None = None
    cav_control: bool = True

    @property
    def model(self) -> ModelMatrices:
        return ModelMatrices(self.tau, self.h)

    def with_(self, **changes) -> "ScenarioConfig":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(changes)
        return ScenarioConfig(**d)

    def to_dict(self) -> dict:
        c = self.controller
        cons = c.constraints
        return {
            "tau": self.tau,
            "h": self.h,
            "steps": self.steps,
            "equilibrium_speed": self.equilibrium_speed,
            "seed": self.seed,
            "platoon": asdict(self.platoon),
            "disturbance": {
                "kind": self.disturbance.kind,
                "speed_jump": self.disturbance.speed_jump,
                "lambda": self.disturbance.lam,
                "jump_range": list(self.disturbance.jump_range),
            },
            "noise": {k: v for k, v in asdict(self.noise).items() if k != "seed"},
            "hdv": {"s0": self.hdv.s0, "gain": self.hdv.gain},
            "controller": {
                "q": c.weights_lqr.q,
                "l": c.weights_lqr.l,
                "r": c.weights_lqr.r,
                "g": np.diag(c.weights_ff.g).tolist(),
                "f_w": c.weights_ff.f_w,
                "n_p_init": c.horizon_policy.n_p_init,
                "n_cap": c.horizon_policy.n_cap,
                "growth": c.horizon_policy.growth,
                "theta_init": c.theta_init,
                "theta_shrink": c.theta_shrink,
                "theta_floor": c.theta_floor,
                "membership_tol": c.membership_tol,
                "d_min": cons.d_min,
                "v_min": cons.v_min,
                "v_max": cons.v_max,
                "u_max": cons.u_max,
                "string_norm": cons.string_stability.norm,
                "string_gain": cons.string_stability.gain,
                "string_c": cons.string_stability.initial_bound,
                "mrpi_epsilon": c.mrpi.epsilon,
            },
            "baseline": self.baseline,
            "leader_horizon": self.leader_horizon,
            "uncertainty": {"runs": self.uncertainty_runs, "seed": self.uncertainty_seed},
            "clip_to_bound": self.clip_to_bound,
            "noise_steps": self.noise_steps,
            "cav_control": self.cav_control,
        }

    @classmethod
    def from_json(cls, text: str) -> "ScenarioConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        return _parse_config(data)


class _Section:
    """Reads keys from one config object, tracking unknown keys."""

    def __init__(self, data, path: str):
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(path or "<root>", "expected an object")
        self.data = data
        self.path = path
        self.used: set[str] = set()

    def name(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def get(self, key: str, default, kind=float):
        self.used.add(key)
        if key not in self.data or self.data[key] is None and default is None:
            return default
        val = self.data[key]
        try:
            if kind is bool:
                if not isinstance(val, bool):
                    raise TypeError
                return val
            if kind is int:
                if isinstance(val, bool) or float(val) != int(val):
                    raise TypeError
                return int(val)
            if kind is float:
                if isinstance(val, bool):
                    raise TypeError
                out = float(val)
                if not math.isfinite(out):
                    raise TypeError
                return out
            if kind is str:
                if not isinstance(val, str):
                    raise TypeError
                return val
            return kind(val)
        except (TypeError, ValueError):
            raise ConfigError(self.name(key), f"invalid value {val!r}") from None

    def section(self, key: str) -> "_Section":
        self.used.add(key)
        return _Section(self.data.get(key), self.name(key))

    def finish(self):
        extra = sorted(set(self.data) - self.used)
        if extra:
            raise ConfigError(self.name(extra[0]), "unknown key")


def _build(path: str, ctor, **kwargs):
    try:
        return ctor(**kwargs)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(path, str(exc)) from None


def _parse_config(data: dict) -> ScenarioConfig:
    root = _Section(data, "")
    tau = root.get("tau", 0.5)
    h = root.get("h", 0.5)
    if not tau > 0:
        raise ConfigError("tau", "must be positive")
    if not h > 0:
        raise ConfigError("h", "must be positive")
    steps = root.get("steps", 150, int)
    if steps < 1:
        raise ConfigError("steps", "must be >= 1")
    v_eq = root.get("equilibrium_speed", 20.0)
    seed = root.get("seed", 0, int)
    if seed < 0:
        raise ConfigError("seed", "must be >= 0")

    ps = root.section("platoon")
    kind = ps.get("kind", "P1", str)
    if kind not in ("P1", "P2", "chain"):
        raise ConfigError("platoon.kind", f"unknown platoon {kind!r}")
    platoon = PlatoonSpec(
        kind,
        ps.get("n", 5, int),
        ps.get("n1", 3, int),
        ps.get("n2", 3, int),
        ps.get("length", 100, int),
        ps.get("penetration", 0.1),
    )
    ps.finish()
    for key in ("n", "n1", "n2"):
        if getattr(platoon, key) < 0:
            raise ConfigError(f"platoon.{key}", "must be >= 0")
    if not 0 < platoon.penetration <= 1:
        raise ConfigError("platoon.penetration", "must lie in (0, 1]")
    if platoon.kind == "chain" and not platoon.segments():
        raise ConfigError("platoon.length", "too short for one CAV at this penetration")

    ds = root.section("disturbance")
    dkind = ds.get("kind", "single", str)
    if dkind not in ("single", "poisson"):
        raise ConfigError("disturbance.kind", f"unknown disturbance {dkind!r}")
    jr = ds.get("jump_range", (-5.0, 5.0), lambda v: tuple(float(x) for x in v))
    if len(jr) != 2 or not jr[0] <= jr[1]:
        raise ConfigError("disturbance.jump_range", "expected [lo, hi] with lo <= hi")
    dist = DisturbanceSpec(dkind, ds.get("speed_jump", -5.0), ds.get("lambda", 10.0), jr)
    if not dist.lam > 0:
        raise ConfigError("disturbance.lambda", "must be positive")
    ds.finish()

    ns = root.section("noise")
    noise = _build("noise", HdvNoise, sigma_s=ns.get("sigma_s", 0.1), sigma_v=ns.get("sigma_v", 0.1),
                   trunc_s=ns.get("trunc_s", 1.0), trunc_v=ns.get("trunc_v", 1.0), seed=seed)
    ns.finish()

    cs = root.section("controller")
    cons = _build(
        "controller",
        ConstraintSpec,
        d_min=cs.get("d_min", 5.0),
        v_min=cs.get("v_min", 0.0),
        v_max=cs.get("v_max", 50.0),
        u_max=cs.get("u_max", 5.0),
        string_stability=_build(
            "controller.string",
            StringStabilitySpec,
            norm=cs.get("string_norm", "Linf", str),
            gain=cs.get("string_gain", 1.0),
            initial_bound=cs.get("string_c", 2.0),
        ),
    )
    ctrl = _build(
        "controller",
        ControllerConfig,
        weights_lqr=_build("controller", LqrWeights, q=cs.get("q", 1.0), l=cs.get("l", 1.0), r=cs.get("r", 1.0)),
        weights_ff=_build("controller.g", FeedforwardWeights,
                          g=cs.get("g", (1.0, 1.0), lambda v: np.asarray(v, dtype=float)),
                          f_w=cs.get("f_w", 1.0)),
        horizon_policy=_build("controller", HorizonPolicy, n_p_init=cs.get("n_p_init", 50, int),
                              n_cap=cs.get("n_cap", 200, int), growth=cs.get("growth", 2.0)),
        theta_init=cs.get("theta_init", 0.7),
        theta_shrink=cs.get("theta_shrink", 0.5),
        theta_floor=cs.get("theta_floor", 0.0),
        membership_tol=cs.get("membership_tol", 1e-9),
        constraints=cons,
        mrpi=_build("controller.mrpi_epsilon", MrpiParams, epsilon=cs.get("mrpi_epsilon", 1e-3)),
    )
    cs.finish()
    if not cons.v_min <= v_eq <= cons.v_max:
        raise ConfigError("equilibrium_speed", "must lie within [v_min, v_max]")

    hs = root.section("hdv")
    hdv = HdvParams(s0=hs.get("s0", 2.0), gain=hs.get("gain", 0.1), v_min=cons.v_min,
                    v_max=cons.v_max, u_max=cons.u_max)
    hs.finish()

    us = root.section("uncertainty")
    runs = us.get("runs", 1000, int)
    if runs < 1000:
        raise ConfigError("uncertainty.runs", "must be >= 1000")
    useed = us.get("seed", 12345, int)
    us.finish()

    baseline = root.get("baseline", "tube", str)
    if baseline not in ("tube", "per_step"):
        raise ConfigError("baseline", f"unknown baseline {baseline!r}")
    leader_horizon = root.get("leader_horizon", 40, int)
    if leader_horizon < 1:
        raise ConfigError("leader_horizon", "must be >= 1")
    noise_steps = root.get("noise_steps", None, int)
    cfg = ScenarioConfig(
        tau=tau, h=h, steps=steps, equilibrium_speed=v_eq, seed=seed, platoon=platoon,
        disturbance=dist, noise=noise, hdv=hdv, controller=ctrl, baseline=baseline,
        leader_horizon=leader_horizon, uncertainty_runs=runs, uncertainty_seed=useed,
        clip_to_bound=root.get("clip_to_bound", False, bool), noise_steps=noise_steps,
        cav_control=root.get("cav_control", True, bool),
    )
    root.finish()
    return cfg


# ---------------------------------------------------------------- disturbances


def generate_disturbances(cfg: ScenarioConfig) -> list[tuple[int, float]]:
    """``(step, speed_jump)`` pairs; Poisson arrivals use exponential
    inter-arrival times with mean ``lam`` seconds, rounded up to steps."""
    d = cfg.disturbance
    if d.kind == "single":
        return [(0, d.speed_jump)]
    rng = np.random.Generator(np.random.Philox(key=[cfg.seed, 0xD157]))
    out = []
    t = 0.0
    while True:
        t += rng.exponential(d.lam)
        step = int(math.ceil(t / cfg.tau - 1e-12))
        if step >= cfg.steps:
            return out
        out.append((step, float(rng.uniform(*d.jump_range))))


# ---------------------------------------------------------------- leader


@dataclass
class LeaderPlan:
    states: np.ndarray  # (horizon + 1, 2) from the post-jump state
    accel: np.ndarray  # (horizon,)
    errors: np.ndarray  # (horizon, 2) against the virtual reference predecessor
    start_step: int = 0

    @property
    def initial_spacing_error(self) -> float:
        return float(abs(self.errors[0, 0]))


def plan_leader(current: VehicleState, disturbance: float, horizon: int, m: ModelMatrices,
                v_eq: float = 20.0, ref_s: float | None = None,
                constraints: ConstraintSpec = ConstraintSpec(),
                weights: FeedforwardWeights = FeedforwardWeights()) -> LeaderPlan:
    """Return path of the leader to its constant-speed reference after a
    speed jump.

    The leader tracks a virtual predecessor ``h v_eq`` ahead of the reference
    position ``ref_s`` (default: the current position) and plans with the
    same QP as the followers, constrained only in speed and acceleration.
    Raises :class:`HardInfeasibilityError` if no plan exists.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    x0 = np.array([current.s, current.v + disturbance])
    ref_s = current.s if ref_s is None else ref_s
    virt = np.column_stack([ref_s + m.h * v_eq + v_eq * m.tau * np.arange(horizon + 1),
                            np.full(horizon + 1, v_eq)])
    e0 = virt[0] + m.c @ x0
    # speeds: v = v_eq - e_v within [v_min, v_max]
    e_set = HPolytope2(
        np.array([[-1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]),
        np.array([LEADER_ES_LIMIT, LEADER_ES_LIMIT, v_eq - constraints.v_min, constraints.v_max - v_eq]),
    )
    plan = solve_plan(e0, virt, e_set, constraints.input_set(), weights, horizon, m)
    if plan is None:
        raise HardInfeasibilityError(f"leader cannot absorb a {disturbance:+g} m/s jump in {horizon} steps")
    states = np.empty((horizon + 1, 2))
    states[0] = x0
    for j in range(horizon):
        states[j + 1] = m.a @ states[j] + m.b * plan.u_bar[j]
    return LeaderPlan(states, plan.u_bar.copy(), plan.e_bar.copy())


# ---------------------------------------------------------------- results


@dataclass
class StringStabilityReport:
    max_speed_dev: list[float]
    l2_speed_dev: list[float]
    amplification_ratios: list[float]
    max_spacing_error: list[float]
    final_error_norm: list[float]
    stable: list[bool]
    speed_string_stable: list[bool]
    string_stable: list[bool]
    threshold: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunResult:
    labels: list[str]
    cav_index: list[int]  # column of each CAV in ``labels``
    s: np.ndarray  # (steps + 1, vehicles)
    v: np.ndarray
    u: np.ndarray  # (steps, vehicles)
    errors: np.ndarray  # (steps, cavs, 2) observed tracking errors
    deviations: np.ndarray  # (steps, cavs, 2) deviation from the plan in force
    in_tube: np.ndarray  # (steps, cavs)
    theta: np.ndarray  # (steps, cavs)
    triggers: list[dict]
    events: list[dict]
    disturbances: list[tuple[int, float]]
    first_plans: list[Any]
    tubes: list[Any]
    plan_end: list[int]
    leader_spacing: float  # largest leader |e_s| right after a jump
    v_eq: float
    tau: float
    metrics: StringStabilityReport | None = None

    @property
    def steps(self) -> int:
        return self.u.shape[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["step"]
        for lab in self.labels:
            head += [f"{lab}_s", f"{lab}_v", f"{lab}_u"]
        for i in self.cav_index:
            lab = self.labels[i]
            head += [f"{lab}_e_s", f"{lab}_e_v", f"{lab}_dev_s", f"{lab}_dev_v"]
        w.writerow(head)
        for k in range(self.steps):
            row = [k]
            for j in range(len(self.labels)):
                row += [_fmt(self.s[k, j]), _fmt(self.v[k, j]), _fmt(self.u[k, j])]
            for c in range(len(self.cav_index)):
                row += [_fmt(x) for x in (*self.errors[k, c], *self.deviations[k, c])]
            w.writerow(row)
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "steps": self.steps,
            "disturbances": [[k, j] for k, j in self.disturbances],
            "triggers": self.triggers,
            "tube_violations": [int(np.sum(~self.in_tube[:, c])) for c in range(len(self.cav_index))],
            "metrics": self.metrics.to_dict() if self.metrics else None,
        }

    def events_jsonl(self) -> str:
        return "".join(json.dumps(ev, sort_keys=True) + "\n" for ev in self.events)


def _fmt(x: float) -> str:
    return f"{float(x):.9g}"


# ---------------------------------------------------------------- simulation

_UNCERTAINTY_CACHE: dict[tuple, UncertaintyEstimate] = {}


def segment_uncertainty(chain_len: int, cfg: ScenarioConfig) -> UncertaintyEstimate:
    """``W_theta`` estimate for a segment, shared across runs of one process."""
    key = (chain_len, cfg.noise.with_seed(0), cfg.hdv, cfg.tau, cfg.h, cfg.uncertainty_runs,
           cfg.uncertainty_seed, cfg.controller.theta_init)
    if key not in _UNCERTAINTY_CACHE:
        noise = cfg.noise.with_seed(cfg.uncertainty_seed)
        _UNCERTAINTY_CACHE[key] = estimate_bound_for_theta(
            chain_len, noise, cfg.controller.theta_init, cfg.uncertainty_runs, cfg.model, cfg.hdv)
    return _UNCERTAINTY_CACHE[key]


def _extend(states: np.ndarray, count: int, m: ModelMatrices) -> np.ndarray:
    """First ``count`` rows of ``states``, continued at constant speed."""
    states = np.asarray(states, dtype=float).reshape(-1, 2)
    if len(states) >= count:
        return states[:count].copy()
    out = np.empty((count, 2))
    out[: len(states)] = states
    for j in range(len(states), count):
        out[j] = m.a @ out[j - 1]
    return out


class _Platoon:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        m = self.m = cfg.model
        v_eq = cfg.equilibrium_speed
        self.segments = cfg.platoon.segments()
        self.leader = np.array([0.0, v_eq])
        self.ref_s0 = 0.0
        self.leader_plan: LeaderPlan | None = None
        self.chains: list[HdvChain | None] = []
        self.cavs: list[np.ndarray] = []
        self.ctrls: list[TubeController] = []
        front = VehicleState(0.0, v_eq)
        for i, n in enumerate(self.segments):
            if n:
                chain = HdvChain.at_equilibrium(front, n, m, cfg.hdv, chain_id=i)
                rear = chain.rear
                self.chains.append(chain)
            else:
                rear = front
                self.chains.append(None)
            cav = np.array([rear.s - m.h * v_eq, v_eq])
            self.cavs.append(cav)
            front = VehicleState.from_array(cav)
            name = f"cav{i + 1}"
            if cfg.baseline == "per_step":
                self.ctrls.append(PerStepMpc(cfg.controller, m, v_eq, name))
            else:
                self.ctrls.append(TubeController(cfg.controller, m, segment_uncertainty(n, cfg), v_eq, name))

    # predecessor of segment i as seen by the planner
    def _leader_nominal(self, step: int, count: int) -> np.ndarray:
        lp = self.leader_plan
        if lp is not None and step - lp.start_step < len(lp.states):
            return _extend(lp.states[step - lp.start_step:], count, self.m)
        return _extend(self.leader, count, self.m)

    def _cav_nominal(self, i: int, step: int, count: int) -> np.ndarray:
        ctrl = self.ctrls[i]
        st = ctrl.state
        if st.mode is Mode.TUBE_TRACKING and st.plan is not None:
            plan = st.plan
            j = step - st.plan_step
            if 0 <= j < plan.n_p:
                x_f = np.linalg.solve(self.m.c, (plan.e_bar[j:] - plan.x_n_bar[j:]).T).T
                return _extend(x_f, count, self.m)
        return _extend(self.cavs[i], count, self.m)

    def provider(self, i: int, step: int):
        def predict(count: int) -> np.ndarray:
            front = self._leader_nominal(step, count) if i == 0 else self._cav_nominal(i - 1, step, count)
            chain = self.chains[i]
            if chain is None:
                return front
            return predict_hdv_chain(chain, front, count - 1, self.m)
        return predict

    def rear_of(self, i: int) -> np.ndarray:
        chain = self.chains[i]
        if chain is not None:
            return chain.states[-1]
        return self.leader if i == 0 else self.cavs[i - 1]


def _labels(segments: list[int]) -> tuple[list[str], list[int]]:
    labels = ["lead"]
    cav_idx = []
    for i, n in enumerate(segments):
        labels += [f"h{i + 1}_{j + 1}" for j in range(n)]
        cav_idx.append(len(labels))
        labels.append(f"cav{i + 1}")
    return labels, cav_idx


def run_scenario(cfg: ScenarioConfig) -> RunResult:
    """Simulate ``cfg.steps`` steps; raises :class:`HardInfeasibilityError`
    (carrying the step) when a plan cannot be found."""
    m = cfg.model
    p = _Platoon(cfg)
    v_eq = cfg.equilibrium_speed
    cons = cfg.controller.constraints
    dist = generate_disturbances(cfg)
    by_step: dict[int, float] = {}
    for k, jump in dist:
        by_step[k] = by_step.get(k, 0.0) + jump

    labels, cav_idx = _labels(p.segments)
    nveh, ncav, steps = len(labels), len(p.segments), cfg.steps
    s = np.zeros((steps + 1, nveh))
    v = np.zeros((steps + 1, nveh))
    u = np.zeros((steps, nveh))
    errors = np.zeros((steps, ncav, 2))
    devs = np.zeros((steps, ncav, 2))
    in_tube = np.ones((steps, ncav), dtype=bool)
    theta = np.zeros((steps, ncav))
    first_plans: list[Any] = [None] * ncav
    tubes: list[Any] = [None] * ncav
    plan_end = [0] * ncav
    leader_events: list[dict] = []

    def snapshot(k):
        col = 0
        s[k, col], v[k, col] = p.leader
        col += 1
        for i in range(ncav):
            if p.chains[i] is not None:
                n = p.chains[i].count
                s[k, col:col + n] = p.chains[i].states[:, 0]
                v[k, col:col + n] = p.chains[i].states[:, 1]
                col += n
            s[k, col], v[k, col] = p.cavs[i]
            col += 1

    snapshot(0)
    leader_e0 = 0.0  # largest |e_s| of the leader right after a jump
    for k in range(steps):
        announce = False
        # a zero jump leaves the leader on its reference: nothing to announce
        if by_step.get(k, 0.0) != 0.0:
            ref_s = p.ref_s0 + v_eq * m.tau * k
            try:
                lp = plan_leader(VehicleState.from_array(p.leader), by_step[k], cfg.leader_horizon, m,
                                 v_eq, ref_s, cons, cfg.controller.weights_ff)
            except HardInfeasibilityError as exc:
                raise HardInfeasibilityError(str(exc), k) from None
            lp.start_step = k
            p.leader_plan = lp
            leader_e0 = max(leader_e0, lp.initial_spacing_error)
            p.leader = lp.states[0].copy()
            snapshot(k)  # record the post-jump state
            announce = True
            leader_events.append({"step": k, "event": "disturbance",
                                  "payload": {"cav": "lead", "jump": by_step[k]}})
        lp = p.leader_plan
        j = k - lp.start_step if lp is not None else -1
        u_lead = float(lp.accel[j]) if lp is not None and 0 <= j < len(lp.accel) else 0.0
        spacing = leader_e0

        u_cav = np.zeros(ncav)
        for i in range(ncav):
            ctrl = p.ctrls[i]
            e = np.asarray(tracking_error(p.rear_of(i), VehicleState.from_array(p.cavs[i]), m))
            errors[k, i] = e
            provider = p.provider(i, k)
            before = ctrl.state.counters.ff_triggers
            try:
                if announce and ctrl.state.mode is Mode.PURE_FEEDBACK:
                    ctrl.notify_disturbance(e, provider, k, spacing)
                else:
                    ctrl.leader_spacing = spacing
                cmd = ctrl.control_step(e, provider, k)
            except HardInfeasibilityError as exc:
                raise HardInfeasibilityError(str(exc).split(": ", 1)[-1], k) from None
            if first_plans[i] is None and ctrl.state.plan is not None:
                first_plans[i] = ctrl.state.plan
                tubes[i] = ctrl.state.tube
            if ctrl.state.plan is not None:
                plan_end[i] = ctrl.state.plan_step + ctrl.state.plan.n_p
            devs[k, i] = ctrl.last_dev
            in_tube[k, i] = contains(ctrl.state.tube, ctrl.last_dev, cfg.controller.membership_tol + 1e-9)
            theta[k, i] = ctrl.state.theta
            u_cav[i] = float(np.clip(cmd, -cons.u_max, cons.u_max)) if cfg.cav_control else 0.0
            # the next CAV reacts to this one's fresh plan
            announce = ctrl.state.counters.ff_triggers > before and cfg.baseline == "tube"

        noise = cfg.noise if cfg.noise_steps is None or k < cfg.noise_steps else None
        front = p.leader
        col = 1
        u[k, 0] = u_lead
        for i in range(ncav):
            chain = p.chains[i]
            if chain is not None:
                preds = np.vstack([front, chain.states[:-1]])
                u[k, col:col + chain.count] = newell_accel(chain.states[:, 0], chain.states[:, 1],
                                                          preds[:, 0], preds[:, 1], chain.params, m)
                col += chain.count
                new = step_hdv_chain(chain, VehicleState.from_array(front), noise, m, step=k)
                if cfg.clip_to_bound:
                    base = m.a @ chain.states[-1] + p.ctrls[i].applied_d
                    states = new.states.copy()
                    states[-1] = base + p.ctrls[i].bound().clip(states[-1] - base)
                    new = HdvChain(states, chain.params, chain.chain_id)
                p.chains[i] = new
            u[k, col] = u_cav[i]
            col += 1
            front = p.cavs[i]
        p.leader = m.a @ p.leader + m.b * u_lead
        for i in range(ncav):
            p.cavs[i] = np.asarray(step_vehicle(VehicleState.from_array(p.cavs[i]), u_cav[i], m))
        snapshot(k + 1)

    events = leader_events + [ev for c in p.ctrls for ev in c.events]
    events.sort(key=lambda ev: ev["step"])
    triggers = [
        {"cav": c.name, "ff_triggers": c.state.counters.ff_triggers,
         "comm_events": c.state.counters.comm_events, "fb_steps": c.state.counters.fb_steps}
        for c in p.ctrls
    ]
    res = RunResult(labels, cav_idx, s, v, u, errors, devs, in_tube, theta, triggers, events, dist,
                    first_plans, tubes, plan_end, leader_e0, v_eq, m.tau)
    quiet = cfg.noise_steps is not None or cfg.noise.silent
    res.metrics = string_stability_report(res, cons.string_stability, threshold=None if quiet else _noisy_threshold(p, cfg))
    return res


def _noisy_threshold(p: _Platoon, cfg: ScenarioConfig) -> float:
    """Residual error band under persistent noise: twice the widest tube
    built from the segments' bounds at ``theta_init``."""
    a_k = p.ctrls[0].state.gain.a_k
    r = [compute_mrpi(a_k, segment_uncertainty(n, cfg).bound, cfg.controller.mrpi).radius_inf()
         for n in p.segments]
    return max(1e-3, 2.0 * max(r, default=0.0))


def string_stability_report(result: RunResult, spec: StringStabilitySpec,
                            threshold: float | None = None, tail: int = 10) -> StringStabilityReport:
    """Speed deviations from equilibrium per vehicle and the CAV stability tests.

    ``stable``: the largest ``|e|_inf`` over the last ``tail`` steps is at
    most ``threshold`` (default ``1e-3``). ``speed_string_stable``: the CAV's
    speed-deviation norm (``spec.norm``) is at most ``spec.gain`` times the
    leader's. ``string_stable`` also requires ``max |e_s|`` within the
    spacing bound ``spec.half_width(leader_spacing)``.
    """
    thr = 1e-3 if threshold is None else threshold
    dv = result.v - result.v_eq
    max_dev = np.max(np.abs(dv), axis=0)
    l2 = np.sqrt(result.tau * np.sum(dv * dv, axis=0))
    ref = max_dev[0] if spec.norm == "Linf" else l2[0]
    ratios, stable, speed_ok, both, max_es, final = [], [], [], [], [], []
    bound_es = spec.half_width(result.leader_spacing)
    for c, col in enumerate(result.cav_index):
        val = max_dev[col] if spec.norm == "Linf" else l2[col]
        ratios.append(float(val / ref) if ref > 0 else (0.0 if val == 0 else math.inf))
        fin = float(np.max(np.abs(result.errors[-tail:, c]))) if result.steps else 0.0
        final.append(fin)
        stable.append(bool(fin <= thr))
        ok = bool(val <= spec.gain * ref + 1e-12)
        speed_ok.append(ok)
        mes = float(np.max(np.abs(result.errors[:, c, 0]))) if result.steps else 0.0
        max_es.append(mes)
        both.append(ok and mes <= bound_es + 1e-9)
    return StringStabilityReport(
        max_speed_dev=max_dev.tolist(),
        l2_speed_dev=l2.tolist(),
        amplification_ratios=ratios,
        max_spacing_error=max_es,
        final_error_norm=final,
        stable=stable,
        speed_string_stable=speed_ok,
        string_stable=both,
        threshold=thr,
    )


# ---------------------------------------------------------------- batches


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return 1


def _run_safe(cfg: ScenarioConfig):
    try:
        return run_scenario(cfg)
    except HardInfeasibilityError as exc:
        return exc


def run_many(cfgs: list[ScenarioConfig], threads: int | None = None) -> list:
    """Run configs in parallel (processes); results in input order.
    Hard infeasibilities come back as exception objects."""
    threads = worker_count() if threads is None else threads
    if threads <= 1 or len(cfgs) <= 1:
        return [_run_safe(c) for c in cfgs]
    with cf.ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_run_safe, cfgs))


def sweep_lambda(cfg: ScenarioConfig, lambdas, seeds, threads: int | None = None) -> list[dict]:
    """Tube-controller trigger counts per mean inter-arrival time ``lambda``."""
    rows = []
    for lam in lambdas:
        dist = DisturbanceSpec("poisson", cfg.disturbance.speed_jump, float(lam), cfg.disturbance.jump_range)
        cfgs = [cfg.with_(disturbance=dist, seed=int(sd), noise=cfg.noise.with_seed(int(sd))) for sd in seeds]
        results = run_many(cfgs, threads)
        counts = [r.triggers[0]["ff_triggers"] for r in results if isinstance(r, RunResult)]
        events = [len(r.disturbances) for r in results if isinstance(r, RunResult)]
        rows.append({
            "lambda": float(lam),
            "runs": len(counts),
            "infeasible": len(results) - len(counts),
            "mean_triggers": float(np.mean(counts)) if counts else math.nan,
            "max_triggers": int(max(counts)) if counts else 0,
            "mean_disturbances": float(np.mean(events)) if events else math.nan,
        })
    return rows


def penetration_sweep(length: int, rates, theta: float, cfg: ScenarioConfig) -> dict[float, list[Box2]]:
    """Per-CAV ``W_theta`` for CAVs placed periodically in ``length`` vehicles.

    Each CAV closes a block of ``round(1/rate)`` vehicles and sees the HDVs
    of its own block; every CAV's estimate uses its own noise stream.
    """
    out: dict[float, list[Box2]] = {}
    m = cfg.model
    for rate in rates:
        if not 0 < rate <= 1:
            raise ValueError("rates must lie in (0, 1]")
        segs = PlatoonSpec("chain", length=length, penetration=rate).segments()
        boxes = []
        for j, n in enumerate(segs):
            noise = cfg.noise.with_seed(cfg.uncertainty_seed + j)
            boxes.append(estimate_bound_for_theta(n, noise, theta, cfg.uncertainty_runs, m, cfg.hdv).bound)
        out[float(rate)] = boxes
    return out
