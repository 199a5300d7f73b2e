"""
Domain models for the clearance-maximizing steering controller.

Plain dataclasses for the vehicle, the planner reference and tube, road-agent
tracks, the MPC problem and its solution, the solver settings, and the
closed-loop scenario and trace records.
"""
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from utils.errors import InvalidProblemError

STATE_DIM = 5


def _require(condition, message):
    if not condition:
        raise InvalidProblemError(message)


def _finite(*values):
    return all(math.isfinite(float(v)) for v in values)


def _as_float_array(values, name):
    array = np.asarray(values, dtype=float)
    _require(array.ndim == 1, f"{name} must be one-dimensional")
    return array


class ObjectClass(Enum):
    PEDESTRIAN = 'pedestrian'
    BICYCLE = 'bicycle'
    CAR = 'car'
    GENERIC = 'generic'


class Side(Enum):
    LEFT = 'left'
    RIGHT = 'right'


class SolverOutcome(Enum):
    CONVERGED = 'converged'
    MAX_ITERATIONS = 'max_iterations'
    TIME_BUDGET_HIT = 'time_budget_hit'
    # merit decrease no longer resolvable in floating point
    STALLED = 'stalled'


# ---------------------------------------------------------------------------
# Vehicle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VehicleState:
    """Kinematic bicycle state (x, y, theta, kappa, kappa_des)."""
    x: float
    y: float
    theta: float
    kappa: float
    kappa_des: float

    def __post_init__(self):
        _require(_finite(self.x, self.y, self.theta, self.kappa, self.kappa_des),
                 "VehicleState fields must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.kappa, self.kappa_des], dtype=float)

    @classmethod
    def from_array(cls, values, normalize: bool = True) -> 'VehicleState':
        x, y, theta, kappa, kappa_des = (float(v) for v in values)
        if normalize:
            theta = normalize_angle(theta)
        return cls(x, y, theta, kappa, kappa_des)


@dataclass(frozen=True)
class ControlInput:
    """Desired curvature rate u, 1/(m*s)."""
    u: float

    def __post_init__(self):
        _require(_finite(self.u), "ControlInput.u must be finite")


@dataclass(frozen=True)
class ModelParams:
    wheelbase_b: float
    tau: float

    def __post_init__(self):
        _require(_finite(self.wheelbase_b, self.tau), "ModelParams must be finite")
        _require(self.wheelbase_b > 0, "wheelbase_b must be > 0")
        _require(self.tau > 0, "tau must be > 0")


@dataclass(frozen=True)
class HorizonConfig:
    n_steps: int
    ts: float

    def __post_init__(self):
        _require(int(self.n_steps) == self.n_steps and self.n_steps >= 1, "n_steps must be an integer >= 1")
        _require(_finite(self.ts) and self.ts > 0, "ts must be > 0")

    @property
    def n_points(self) -> int:
        return self.n_steps + 1


@dataclass(frozen=True)
class Footprint:
    """Rectangular vehicle footprint centred on the modelled position."""
    length: float = 4.4
    width: float = 1.8

    def __post_init__(self):
        _require(self.length > 0 and self.width > 0, "footprint dimensions must be > 0")

    @property
    def half_length(self) -> float:
        return 0.5 * self.length

    @property
    def half_width(self) -> float:
        return 0.5 * self.width


def normalize_angle(angle):
    """Wrap an angle (scalar or array) to (-pi, pi]."""
    wrapped = np.pi - np.mod(np.pi - np.asarray(angle, dtype=float), 2.0 * np.pi)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


# ---------------------------------------------------------------------------
# Reference and tube
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReferencePoint:
    x_bar: float
    y_bar: float
    theta_bar: float
    kappa_bar: float
    v_k: float

    def __post_init__(self):
        _require(_finite(self.x_bar, self.y_bar, self.theta_bar, self.kappa_bar, self.v_k),
                 "ReferencePoint fields must be finite")
        _require(self.v_k >= 0, "ReferencePoint.v_k must be >= 0")


class ReferenceTrajectory:
    """Discretized planner reference z_k = (x_bar, y_bar, theta_bar, kappa_bar) with speeds v_k.

    Stored column-wise; ``points`` and indexing give ReferencePoint views.
    Headings are kept unwrapped (continuous along the trajectory).
    """

    def __init__(self, x_bar, y_bar, theta_bar, kappa_bar, speeds, arc_length=None):
        self.x_bar = _as_float_array(x_bar, 'x_bar')
        self.y_bar = _as_float_array(y_bar, 'y_bar')
        self.theta_bar = _as_float_array(theta_bar, 'theta_bar')
        self.kappa_bar = _as_float_array(kappa_bar, 'kappa_bar')
        self.speeds = _as_float_array(speeds, 'speeds')
        n = len(self.x_bar)
        _require(n >= 2, "a reference trajectory needs at least two points")
        for name in ('y_bar', 'theta_bar', 'kappa_bar', 'speeds'):
            _require(len(getattr(self, name)) == n, f"{name} length must equal {n}")
        stacked = np.vstack([self.x_bar, self.y_bar, self.theta_bar, self.kappa_bar, self.speeds])
        _require(bool(np.all(np.isfinite(stacked))), "reference values must be finite")
        _require(bool(np.all(self.speeds >= 0)), "reference speeds must be >= 0")
        self.arc_length = None if arc_length is None else _as_float_array(arc_length, 'arc_length')

    def __len__(self):
        return len(self.x_bar)

    def __getitem__(self, k) -> ReferencePoint:
        return ReferencePoint(float(self.x_bar[k]), float(self.y_bar[k]), float(self.theta_bar[k]),
                              float(self.kappa_bar[k]), float(self.speeds[k]))

    @property
    def points(self) -> List[ReferencePoint]:
        return [self[k] for k in range(len(self))]

    def spacing_consistent(self, ts: float, tolerance: float = 0.1) -> bool:
        """Consecutive points are v_k * ts apart, within the relative tolerance."""
        step = np.hypot(np.diff(self.x_bar), np.diff(self.y_bar))
        expected = self.speeds[:-1] * ts
        return bool(np.all(np.abs(step - expected) <= tolerance * expected + 1e-9))


@dataclass
class TubeBounds:
    """Per-step signed lateral-error bounds; crossed bounds are allowed."""
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = _as_float_array(self.lower, 'lower')
        self.upper = _as_float_array(self.upper, 'upper')
        _require(len(self.lower) == len(self.upper), "tube lower/upper lengths differ")
        _require(bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper))),
                 "tube bounds must be finite")

    def __len__(self):
        return len(self.lower)

    @property
    def crossed(self) -> np.ndarray:
        return self.lower > self.upper


@dataclass(frozen=True)
class ObstacleCut:
    """Moves one tube side inward by ``intrusion`` over steps first_step..last_step (inclusive)."""
    first_step: int
    last_step: int
    side: Side
    intrusion: float

    def __post_init__(self):
        _require(self.intrusion >= 0, "obstacle intrusion must be >= 0")


@dataclass(frozen=True)
class ShrinkZone:
    """Narrows the lane to ``half_width`` over first_step..last_step, reached after a linear taper."""
    first_step: int
    last_step: int
    half_width: float
    taper_steps: int

    def __post_init__(self):
        _require(self.taper_steps >= 1, "taper length must be >= 1 step")


# ---------------------------------------------------------------------------
# Clearance safety
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SafetyFunctionParams:
    """Sigmoid f_s(d) = s_target / (1 + exp(-a (d - b)))."""
    a: float = 2.0
    b: float = 1.5
    s_target: float = 1.0

    def __post_init__(self):
        _require(_finite(self.a, self.b, self.s_target), "safety parameters must be finite")
        _require(self.a > 0, "sigmoid steepness a must be > 0")
        _require(self.b >= 0, "sigmoid midpoint b must be >= 0")
        _require(self.s_target > 0, "s_target must be > 0")


@dataclass(frozen=True)
class LongitudinalSafetyParams:
    c: float = 0.2
    s_target: float = 1.0

    def __post_init__(self):
        _require(_finite(self.c, self.s_target) and self.c > 0, "decay rate c must be > 0")
        _require(self.s_target > 0, "s_target must be > 0")


@dataclass(frozen=True)
class ClassSafetyParams:
    lateral: SafetyFunctionParams = field(default_factory=SafetyFunctionParams)
    longitudinal: LongitudinalSafetyParams = field(default_factory=LongitudinalSafetyParams)

    @classmethod
    def build(cls, a=2.0, b=1.5, c=0.2, s_target=1.0) -> 'ClassSafetyParams':
        return cls(SafetyFunctionParams(a, b, s_target), LongitudinalSafetyParams(c, s_target))


def default_class_params(s_target: float = 1.0) -> Dict[ObjectClass, ClassSafetyParams]:
    return {object_class: ClassSafetyParams.build(s_target=s_target) for object_class in ObjectClass}


@dataclass
class ObjectTrack:
    """A road agent's per-step distances from the discretized reference (footprint-adjusted)."""
    id: str
    object_class: ObjectClass
    sides: Tuple[Side, ...]
    d_ref: np.ndarray
    d_lon: np.ndarray

    def __post_init__(self):
        self.sides = tuple(Side(side) for side in self.sides)
        self.d_ref = _as_float_array(self.d_ref, 'd_ref')
        self.d_lon = _as_float_array(self.d_lon, 'd_lon')
        _require(len(self.sides) == len(self.d_ref) == len(self.d_lon),
                 f"object {self.id}: per-step lists must have equal length")
        _require(bool(np.all(self.d_ref >= 0)), f"object {self.id}: d_ref must be >= 0")

    @property
    def left_mask(self) -> np.ndarray:
        return np.array([side is Side.LEFT for side in self.sides])


@dataclass
class SideClearance:
    """Selected most-constraining object data for one side; inactive steps carry d_ref=inf, s_lon=0."""
    active: np.ndarray
    d_ref: np.ndarray
    s_lon: np.ndarray
    a: np.ndarray
    b: np.ndarray
    object_index: np.ndarray

    @classmethod
    def inactive(cls, n_points: int) -> 'SideClearance':
        return cls(active=np.zeros(n_points, dtype=bool), d_ref=np.full(n_points, np.inf),
                   s_lon=np.zeros(n_points), a=np.ones(n_points), b=np.zeros(n_points),
                   object_index=np.full(n_points, -1, dtype=int))

    def __len__(self):
        return len(self.active)


@dataclass
class ClearanceInputs:
    left: SideClearance
    right: SideClearance

    @classmethod
    def empty(cls, n_points: int) -> 'ClearanceInputs':
        return cls(SideClearance.inactive(n_points), SideClearance.inactive(n_points))

    def side(self, side: Side) -> SideClearance:
        return self.left if side is Side.LEFT else self.right

    @property
    def any_active(self) -> bool:
        return bool(self.left.active.any() or self.right.active.any())


# ---------------------------------------------------------------------------
# MPC problem
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostWeights:
    q1: float = 5.0
    q2: float = 10.0
    q3: float = 1.0
    p1: float = 10.0
    p2: float = 20.0
    p3: float = 2.0
    r_input: float = 10.0
    alpha: float = 1.0
    slack_linear: float = 100.0
    slack_quadratic: float = 1000.0

    def __post_init__(self):
        values = (self.q1, self.q2, self.q3, self.p1, self.p2, self.p3, self.r_input,
                  self.alpha, self.slack_linear, self.slack_quadratic)
        _require(_finite(*values), "cost weights must be finite")
        _require(min(self.q1, self.q2, self.q3, self.p1, self.p2, self.p3) >= 0,
                 "tracking weights must be >= 0")
        _require(self.r_input > 0, "r_input must be > 0")
        _require(self.alpha >= 0, "alpha must be >= 0")
        _require(self.slack_linear >= 0 and self.slack_quadratic >= 0, "slack penalties must be >= 0")
        _require(self.slack_linear > 0 or self.slack_quadratic > 0,
                 "at least one slack penalty must be > 0")

    def scaled(self, factor: float) -> 'CostWeights':
        return CostWeights(*(factor * getattr(self, name) for name in self.__dataclass_fields__))

    def with_alpha(self, alpha: float) -> 'CostWeights':
        return replace(self, alpha=alpha)


@dataclass(frozen=True)
class Limits:
    u_min: float = -0.3
    u_max: float = 0.3
    kappa_min: float = -0.25
    kappa_max: float = 0.25
    s_min: float = 0.0

    def __post_init__(self):
        _require(_finite(self.u_min, self.u_max, self.kappa_min, self.kappa_max, self.s_min),
                 "limits must be finite")
        _require(self.u_min < self.u_max, "u_min must be < u_max")
        _require(self.kappa_min < self.kappa_max, "kappa_min must be < kappa_max")
        _require(self.s_min >= 0, "s_min must be >= 0")


@dataclass
class DecisionVariables:
    states: np.ndarray   # (N+1, 5)
    inputs: np.ndarray   # (N,)
    slacks: np.ndarray   # (N+1,)
    safety: np.ndarray   # (N+1,)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float).reshape(-1, STATE_DIM)
        self.inputs = _as_float_array(self.inputs, 'inputs')
        self.slacks = _as_float_array(self.slacks, 'slacks')
        self.safety = _as_float_array(self.safety, 'safety')
        n = len(self.inputs)
        _require(len(self.states) == n + 1 and len(self.slacks) == n + 1 and len(self.safety) == n + 1,
                 "decision variable dimensions are inconsistent with the horizon")

    @property
    def n_steps(self) -> int:
        return len(self.inputs)

    def state(self, k: int) -> VehicleState:
        return VehicleState.from_array(self.states[k])

    def copy(self) -> 'DecisionVariables':
        return DecisionVariables(self.states.copy(), self.inputs.copy(), self.slacks.copy(), self.safety.copy())


@dataclass
class MpcProblem:
    """One instance of the finite-horizon program solved each control cycle."""
    horizon: HorizonConfig
    model: ModelParams
    weights: CostWeights
    limits: Limits
    reference: ReferenceTrajectory
    tube: TubeBounds
    clearance: ClearanceInputs
    initial_state: VehicleState
    safety_params: Dict[ObjectClass, ClassSafetyParams] = field(default_factory=default_class_params)
    s_target: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        n_points = self.horizon.n_points
        _require(len(self.reference) == n_points,
                 f"reference has {len(self.reference)} points, horizon needs {n_points}")
        _require(len(self.tube) == n_points, f"tube has {len(self.tube)} steps, horizon needs {n_points}")
        _require(len(self.clearance.left) == n_points and len(self.clearance.right) == n_points,
                 "clearance inputs length does not match the horizon")
        _require(self.s_target > 0, "s_target must be > 0")
        _require(self.limits.s_min < self.s_target, "s_min must be below s_target")
        kappa = self.initial_state.kappa
        _require(self.limits.kappa_min <= kappa <= self.limits.kappa_max,
                 f"initial curvature {kappa:.4f} outside [{self.limits.kappa_min}, {self.limits.kappa_max}]")

    @property
    def n_steps(self) -> int:
        return self.horizon.n_steps

    @property
    def biased(self) -> bool:
        return self.weights.alpha > 0


@dataclass
class SolverDiagnostics:
    iterations: int = 0
    kkt_residual: float = float('inf')
    solve_time: float = 0.0
    qp_iterations: List[int] = field(default_factory=list)
    step_lengths: List[float] = field(default_factory=list)
    merit_history: List[Tuple[float, float]] = field(default_factory=list)
    regularizations: int = 0
    max_hard_violation: float = 0.0
    active_slacks: List[Tuple[int, float]] = field(default_factory=list)
    n_variables: int = 0
    n_equalities: int = 0
    n_inequalities: int = 0
    n_safety_variables: int = 0


@dataclass
class MpcSolution:
    variables: DecisionVariables
    objective: float
    first_input: ControlInput
    diagnostics: SolverDiagnostics


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SolverConfig:
    max_sqp_iterations: int = 20
    kkt_tolerance: float = 1e-6
    max_qp_iterations: int = 60
    time_budget: float = 0.0
    warm_start: bool = True
    regularization_epsilon: float = 1e-8

    def __post_init__(self):
        _require(self.max_sqp_iterations >= 1 and self.max_qp_iterations >= 1, "iteration caps must be >= 1")
        _require(self.kkt_tolerance > 0, "kkt_tolerance must be > 0")
        _require(self.time_budget >= 0, "time_budget must be >= 0")
        _require(self.regularization_epsilon >= 0, "regularization_epsilon must be >= 0")


@dataclass
class SolverStatus:
    outcome: SolverOutcome
    kkt_residual: float
    iterations: int
    wall_time: float


# ---------------------------------------------------------------------------
# Scenario and simulation records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RoadShrinkZone:
    """Lane narrowing along the path, in arc length (meters)."""
    start_s: float
    end_s: float
    half_width: float
    taper_m: float


@dataclass(frozen=True)
class RoadConfig:
    lane_half_width: float
    shrink_zones: Tuple[RoadShrinkZone, ...] = ()


@dataclass(frozen=True)
class PathSegment:
    kind: str              # 'straight' or 'arc'
    length: float = 0.0    # straight
    radius: float = 0.0    # arc
    angle: float = 0.0     # arc, signed (positive turns left)


@dataclass(frozen=True)
class ReferenceConfig:
    start: Tuple[float, float] = (0.0, 0.0)
    heading: float = 0.0
    segments: Tuple[PathSegment, ...] = ()
    waypoints: Tuple[Tuple[float, float], ...] = ()
    resolution: float = 0.25
    speed_profile: Tuple[Tuple[float, float], ...] = ((0.0, 5.0),)

    def speed_at(self, t):
        """Piecewise-linear open-loop speed schedule, held constant outside its knots."""
        times = np.array([knot[0] for knot in self.speed_profile], dtype=float)
        speeds = np.array([knot[1] for knot in self.speed_profile], dtype=float)
        return np.interp(t, times, speeds)


@dataclass(frozen=True)
class AgentSpec:
    id: str
    object_class: ObjectClass
    length: float = 0.6
    width: float = 0.6
    position: Optional[Tuple[float, float]] = None
    station: Optional[Tuple[float, float]] = None
    velocity: Tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class PlantOptions:
    actuation_lag: bool = True
    tau_scale: float = 1.0
    wheelbase_scale: float = 1.0


@dataclass(frozen=True)
class SimOptions:
    duration: float
    initial_lateral_offset: float = 0.0
    initial_heading_offset: float = 0.0
    plant: PlantOptions = field(default_factory=PlantOptions)


@dataclass(frozen=True)
class Scenario:
    name: str
    model: ModelParams
    footprint: Footprint
    limits: Limits
    weights: CostWeights
    s_target: float
    safety: Dict[ObjectClass, ClassSafetyParams]
    horizon: HorizonConfig
    road: RoadConfig
    reference: ReferenceConfig
    agents: Tuple[AgentSpec, ...]
    sim: SimOptions
    solver: SolverConfig = field(default_factory=SolverConfig)

    def with_alpha(self, alpha: float) -> 'Scenario':
        return replace(self, weights=self.weights.with_alpha(alpha))


@dataclass
class CycleRecord:
    time: float
    state: VehicleState
    u: float
    e_lat: float
    steering_angle: float
    slack_0: float
    max_slack: float
    tube_lower_0: float
    tube_upper_0: float
    safety_0: float
    iterations: int
    solve_ms: float
    outcome: SolverOutcome
    kkt_residual: float
    predicted_next: np.ndarray


@dataclass
class ClearanceEvent:
    agent_id: str
    time: float
    clearance: float
    e_lat: float
    side: Side


@dataclass
class SimTrace:
    scenario_name: str
    ts: float
    cycles: List[CycleRecord] = field(default_factory=list)
    agent_ids: List[str] = field(default_factory=list)
    agent_longitudinal: List[np.ndarray] = field(default_factory=list)
    agent_lateral: List[np.ndarray] = field(default_factory=list)
    agent_clearance: List[np.ndarray] = field(default_factory=list)
    agent_overlap: List[np.ndarray] = field(default_factory=list)
    final_state: Optional[VehicleState] = None

    def __len__(self):
        return len(self.cycles)

    @property
    def times(self) -> np.ndarray:
        return np.array([cycle.time for cycle in self.cycles])

    @property
    def positions(self) -> np.ndarray:
        return np.array([[cycle.state.x, cycle.state.y] for cycle in self.cycles]).reshape(-1, 2)

    @property
    def inputs(self) -> np.ndarray:
        return np.array([cycle.u for cycle in self.cycles])

    @property
    def lateral_errors(self) -> np.ndarray:
        return np.array([cycle.e_lat for cycle in self.cycles])

    @property
    def solve_ms(self) -> np.ndarray:
        return np.array([cycle.solve_ms for cycle in self.cycles])

    @property
    def collision_free(self) -> bool:
        """No cycle where an agent overlaps the vehicle footprint in both directions."""
        for clearance, overlap in zip(self.agent_clearance, self.agent_overlap):
            if np.any((clearance <= 0.0) & overlap):
                return False
        return True


@dataclass
class TimingStats:
    average_ms: float
    maximum_ms: float
    p50_ms: float
    p95_ms: float
    samples: int

    @classmethod
    def from_samples(cls, samples_ms) -> 'TimingStats':
        samples = np.asarray(samples_ms, dtype=float)
        if samples.size == 0:
            return cls(0.0, 0.0, 0.0, 0.0, 0)
        return cls(float(samples.mean()), float(samples.max()), float(np.percentile(samples, 50)),
                   float(np.percentile(samples, 95)), int(samples.size))


@dataclass
class ClearancePair:
    agent_id: str
    biased: float
    unbiased: float

    @property
    def improvement_pct(self) -> Optional[float]:
        if self.unbiased <= 0:
            return None
        return 100.0 * (self.biased / self.unbiased - 1.0)


@dataclass
class BiasingComparison:
    biased: SimTrace
    unbiased: SimTrace
    biased_events: List[ClearanceEvent]
    unbiased_events: List[ClearanceEvent]
    pairs: List[ClearancePair]
    min_clearance_biased: Optional[float]
    min_clearance_unbiased: Optional[float]
    improvement_pct: Optional[float]
    path_delta_max: float
    timing: Dict[str, TimingStats]
    biasing: bool = True


@dataclass
class RunReport:
    trace_path: str
    events_path: str
    timing: TimingStats
    exit_status: int = 0
    extra_paths: Dict[str, str] = field(default_factory=dict)


@dataclass
class BenchReport:
    """Solve-time statistics of one configuration over repeated runs of a scenario."""
    label: str
    alpha: float
    timing: TimingStats
    run_averages_ms: List[float]
    n_variables: int
    n_equalities: int
    n_inequalities: int
    n_safety_variables: int

    @property
    def run_average_max_ms(self) -> float:
        return max(self.run_averages_ms, default=0.0)
