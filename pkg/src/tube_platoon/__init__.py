"""Event-triggered tube MPC for a connected automated vehicle following
human-driven vehicles."""

from .controller import (
    ConstraintSpec,
    ControllerConfig,
    HardInfeasibilityError,
    Mode,
    PerStepMpc,
    StringStabilitySpec,
    TubeController,
    detect_event,
)
from .dynamics import (
    ModelMatrices,
    TrackingError,
    VehicleState,
    exogenous_term,
    step_error_deviation,
    step_vehicle,
    tracking_error,
)
from .feedforward import FeedforwardWeights, HorizonPolicy, TubePlan, plan_with_growth, solve_plan
from .hdv import (
    HdvChain,
    HdvNoise,
    HdvParams,
    UncertaintyEstimate,
    estimate_bound_for_theta,
    measure_theta_for_bound,
    predict_hdv_chain,
    step_hdv_chain,
)
from .lqr import FeedbackGain, LqrWeights, solve_dare, synthesize_gain
from .sets import Box2, HPolytope2, Interval, MrpiParams, Zonotope2, compute_mrpi
from .sim import RunResult, ScenarioConfig, penetration_sweep, run_scenario, string_stability_report

__version__ = "0.1.0"
