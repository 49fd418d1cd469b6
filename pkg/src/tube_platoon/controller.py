"""Event-triggered tube controller for one CAV.

A plan (the tube centre) is made when the predecessor announces a new
disturbance or when the deviation from the plan leaves the invariant tube.
Between replans the CAV applies ``u = u_bar + K (e - e_bar)``; once the plan
is exhausted it applies ``u = K e``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dynamics import ModelMatrices
from .feedforward import FeedforwardWeights, HorizonPolicy, TubePlan, plan_with_growth
from .hdv import UncertaintyEstimate
from .lqr import FeedbackGain, LqrWeights, synthesize_gain
from .sets import (
    DEFAULT_MEMBERSHIP_TOL,
    Box2,
    HPolytope2,
    Interval,
    MrpiParams,
    Zonotope2,
    compute_mrpi,
    contains,
    interval_pontryagin_diff,
    pontryagin_diff,
)

# below this the next halving snaps theta to the floor
THETA_MIN_STEP = 1e-2

PredictionProvider = Callable[[int], np.ndarray]


class HardInfeasibilityError(RuntimeError):
    """No plan exists even with the smallest tube and the longest horizon."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class Mode(enum.Enum):
    PURE_FEEDBACK = "pure_feedback"
    TUBE_TRACKING = "tube_tracking"


@dataclass(frozen=True)
class StringStabilitySpec:
    """Linear class-K bound ``|e_s(k)| <= gain * max(|e_s,p(0)|, initial_bound)``
    with ``e_s,p(0)`` the leader's spacing error right after its disturbance."""

    norm: str = "Linf"
    gain: float = 1.0
    initial_bound: float = 2.0

    def __post_init__(self):
        if self.norm not in ("L2", "Linf"):
            raise ValueError("norm must be 'L2' or 'Linf'")
        if not self.gain > 0:
            raise ValueError("gain must be positive")
        if not self.initial_bound > 0:
            raise ValueError("initial_bound must be positive")

    def half_width(self, leader_spacing: float) -> float:
        return self.gain * max(abs(leader_spacing), self.initial_bound)


@dataclass(frozen=True)
class ConstraintSpec:
    d_min: float = 5.0
    v_min: float = 0.0
    v_max: float = 50.0
    u_max: float = 5.0
    string_stability: StringStabilitySpec = field(default_factory=StringStabilitySpec)

    def __post_init__(self):
        if not self.d_min > 0:
            raise ValueError("d_min must be positive")
        if not self.v_min < self.v_max:
            raise ValueError("need v_min < v_max")
        if not self.u_max > 0:
            raise ValueError("u_max must be positive")

    def input_set(self) -> Interval:
        return Interval(-self.u_max, self.u_max)

    def error_set(self, v_n: float, leader_spacing: float = 0.0) -> HPolytope2:
        """Admissible errors behind a predecessor moving at ``v_n``.

        Spacing: ``-min(d_min, D) <= e_s <= D`` with ``D`` the string bound.
        Speed: ``v_f = v_n - e_v`` within ``[v_min, v_max]``.
        """
        d = self.string_stability.half_width(leader_spacing)
        return HPolytope2(
            np.array([[-1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]),
            np.array([min(self.d_min, d), d, v_n - self.v_min, self.v_max - v_n]),
        )


@dataclass(frozen=True)
class ControllerConfig:
    weights_lqr: LqrWeights = field(default_factory=LqrWeights)
    weights_ff: FeedforwardWeights = field(default_factory=FeedforwardWeights)
    horizon_policy: HorizonPolicy = field(default_factory=HorizonPolicy)
    theta_init: float = 0.7
    theta_shrink: float = 0.5
    theta_floor: float = 0.0
    membership_tol: float = DEFAULT_MEMBERSHIP_TOL
    constraints: ConstraintSpec = field(default_factory=ConstraintSpec)
    mrpi: MrpiParams = field(default_factory=MrpiParams)

    def __post_init__(self):
        if not 0 <= self.theta_floor < self.theta_init <= 1:
            raise ValueError("need 0 <= theta_floor < theta_init <= 1")
        if not 0 < self.theta_shrink < 1:
            raise ValueError("theta_shrink must lie in (0, 1)")
        if self.membership_tol < 0:
            raise ValueError("membership_tol must be >= 0")

    def theta_schedule(self) -> list[float]:
        out = [self.theta_init]
        while out[-1] > self.theta_floor:
            nxt = out[-1] * self.theta_shrink
            out.append(nxt if nxt >= max(self.theta_floor, THETA_MIN_STEP) else self.theta_floor)
        return out


@dataclass
class Counters:
    ff_triggers: int = 0
    comm_events: int = 0
    fb_steps: int = 0


@dataclass
class ControllerState:
    mode: Mode
    gain: FeedbackGain
    theta: float
    tube: Zonotope2
    tight_e: HPolytope2
    tight_u: Interval
    plan: TubePlan | None = None
    step_in_plan: int = 0
    plan_step: int = 0  # simulation step at which plan index 0 applies
    prev_dev: np.ndarray = field(default_factory=lambda: np.zeros(2))
    counters: Counters = field(default_factory=Counters)


def detect_event(prev_dev, curr_dev, tube: Zonotope2, tol: float = DEFAULT_MEMBERSHIP_TOL) -> bool:
    """Event M: the deviation was inside the tube and has just left it."""
    return contains(tube, prev_dev, tol) and not contains(tube, curr_dev, tol)


@dataclass
class _TubeSets:
    theta: float
    bound: Box2
    tube: Zonotope2
    tight_u: Interval


class TubeController:
    """One CAV running the event-triggered tube scheme."""

    def __init__(self, config: ControllerConfig, m: ModelMatrices, uncertainty: UncertaintyEstimate,
                 v_eq: float = 20.0, name: str = "cav"):
        self.config = config
        self.m = m
        self.uncertainty = uncertainty
        self.v_eq = v_eq
        self.name = name
        self.events: list[dict] = []
        # exogenous term assumed by the plan for the input last applied
        self.applied_d = np.zeros(2)
        # deviation from the plan used for the last command
        self.last_dev = np.zeros(2)
        self.leader_spacing = 0.0
        self._cache: dict[float, _TubeSets] = {}
        gain = synthesize_gain(m, config.weights_lqr)
        self._gain = gain
        base = config.constraints.error_set(v_eq)
        if base.is_empty():
            raise ValueError("constraint set is empty before tightening")
        for theta in config.theta_schedule():
            sets = self._sets(theta)
            tight = pontryagin_diff(base, sets.tube)
            if not tight.empty and not sets.tight_u.empty:
                break
            self._log(0, "theta_shrink", {"theta": theta, "reason": "empty tight set"})
        else:
            raise HardInfeasibilityError("tightened sets empty at theta_floor")
        self.state = ControllerState(Mode.PURE_FEEDBACK, gain, sets.theta, sets.tube, tight, sets.tight_u)

    # -- set bookkeeping -------------------------------------------------
    def _sets(self, theta: float) -> _TubeSets:
        if theta not in self._cache:
            bound = self.uncertainty.bound_at(theta)
            tube = compute_mrpi(self._gain.a_k, bound, self.config.mrpi)
            tight_u = interval_pontryagin_diff(self.config.constraints.input_set(), self._gain.k, tube)
            self._cache[theta] = _TubeSets(theta, bound, tube, tight_u)
        return self._cache[theta]

    def bound(self) -> Box2:
        """Uncertainty box of the tube currently in force."""
        return self._sets(self.state.theta).bound

    def tight_error_sets(self, pred: np.ndarray, tube: Zonotope2) -> list[HPolytope2]:
        cons = self.config.constraints
        return [pontryagin_diff(cons.error_set(v, self.leader_spacing), tube) for v in pred[:, 1]]

    def _log(self, step: int, event: str, payload: dict):
        self.events.append({"step": int(step), "event": event, "payload": {"cav": self.name, **payload}})

    def event_log_lines(self) -> str:
        return "".join(json.dumps(ev, sort_keys=True) + "\n" for ev in self.events)

    # -- planning --------------------------------------------------------
    def _replan(self, e, provider: PredictionProvider, step: int, reason: str) -> TubePlan:
        st = self.state
        cfg = self.config
        for i, theta in enumerate(cfg.theta_schedule()):
            sets = self._sets(theta)
            if i:
                self._log(step, "theta_shrink", {"theta": theta})
            if sets.tight_u.empty:
                continue
            plan = plan_with_growth(
                e, provider, lambda pred, tube=sets.tube: self.tight_error_sets(pred, tube),
                sets.tight_u, cfg.weights_ff, cfg.horizon_policy, self.m, tube=sets.tube,
            )
            if plan is None:
                continue
            plan.theta = theta
            st.counters.ff_triggers += 1
            st.counters.comm_events += 1
            if st.mode is not Mode.TUBE_TRACKING:
                self._log(step, "mode_change", {"mode": Mode.TUBE_TRACKING.value})
            st.mode = Mode.TUBE_TRACKING
            st.plan = plan
            st.step_in_plan = 0
            st.plan_step = step
            st.prev_dev = np.zeros(2)
            st.theta = theta
            st.tube = sets.tube
            st.tight_u = sets.tight_u
            st.tight_e = pontryagin_diff(cfg.constraints.error_set(self.v_eq, self.leader_spacing), sets.tube)
            self._log(step, "trigger", {"reason": reason, "theta": theta, "n_p": plan.n_p})
            return plan
        raise HardInfeasibilityError(f"{self.name}: no feasible plan at theta_floor", step)

    def notify_disturbance(self, e, provider: PredictionProvider, step: int = 0,
                           leader_spacing: float | None = None) -> TubePlan:
        """Predecessor announced a new disturbance: plan from the current error."""
        if leader_spacing is not None:
            self.leader_spacing = float(leader_spacing)
        return self._replan(np.asarray(e, dtype=float), provider, step, "disturbance")

    def control_step(self, e, provider: PredictionProvider, step: int = 0) -> float:
        """Acceleration command for the observed error ``e``."""
        st = self.state
        e = np.asarray(e, dtype=float)
        if st.mode is Mode.PURE_FEEDBACK:
            st.counters.fb_steps += 1
            self.applied_d = np.zeros(2)
            self.last_dev = e
            return self._gain.apply(e)
        dev = e - st.plan.e_bar[st.step_in_plan]
        if detect_event(st.prev_dev, dev, st.tube, self.config.membership_tol):
            self._log(step, "event_m", {"dev": dev.tolist()})
            self._replan(e, provider, step, "event_m")
            dev = e - st.plan.e_bar[0]
        j = st.step_in_plan
        self.applied_d = st.plan.d_bar[j]
        u = float(st.plan.u_bar[j]) + self._gain.apply(dev)
        st.prev_dev = dev
        self.last_dev = dev
        st.step_in_plan = j + 1
        if st.step_in_plan >= st.plan.n_p:
            st.mode = Mode.PURE_FEEDBACK
            self._log(step, "mode_change", {"mode": Mode.PURE_FEEDBACK.value})
        return u

    def planned_deviation(self, e) -> np.ndarray:
        """``e - e_bar`` at the current plan step (``e`` itself without a plan)."""
        st = self.state
        if st.mode is Mode.TUBE_TRACKING:
            return np.asarray(e, dtype=float) - st.plan.e_bar[st.step_in_plan]
        return np.asarray(e, dtype=float)


class PerStepMpc(TubeController):
    """Baseline: plan with an empty tube at every step and apply the first input."""

    def __init__(self, config: ControllerConfig, m: ModelMatrices, v_eq: float = 20.0, name: str = "cav"):
        silent = UncertaintyEstimate(Box2((0.0, 0.0)), 1.0, 1, np.zeros((1, 2)))
        super().__init__(config, m, silent, v_eq, name)

    def notify_disturbance(self, e, provider, step: int = 0, leader_spacing: float | None = None):
        if leader_spacing is not None:
            self.leader_spacing = float(leader_spacing)
        return None

    def control_step(self, e, provider: PredictionProvider, step: int = 0) -> float:
        plan = self._replan(np.asarray(e, dtype=float), provider, step, "per_step")
        self.state.step_in_plan = 1
        self.applied_d = plan.d_bar[0]
        self.last_dev = np.zeros(2)
        return float(plan.u_bar[0])
