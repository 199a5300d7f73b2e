"""
Deterministic receding-horizon simulation.

Each cycle measures the plant, re-anchors the reference window at the
vehicle's projection on the planner path, rebuilds tube and object data from
the scripted agents, solves the MPC problem warm-started from the shifted
previous solution and applies the first input for one sampling period.
"""
import logging
import math
from typing import List, Optional, Sequence

import numpy as np

from models import (AgentSpec, BiasingComparison, ClearanceEvent, ClearancePair, CycleRecord, MpcProblem,
                    ModelParams, ObjectTrack, ObstacleCut, Scenario, Side, SimTrace, SolverConfig,
                    SolverOutcome, TimingStats, VehicleState)
from utils.clearance_safety import class_params_table, select_most_constraining
from utils.errors import PathTooShortError
from utils.nlp_solver import SqpSolver, warm_start_shift
from utils.reference_tube import (PlannerPath, build_tube, discretize_reference, lateral_error,
                                  relative_coordinates, zones_to_steps)
from utils.vehicle_dynamics import plant_step, steering_angle

logger = logging.getLogger(__name__)

PROFILE_SAMPLES_PER_SECOND = 100


def planner_path(scenario: Scenario) -> PlannerPath:
    reference = scenario.reference
    if reference.segments:
        return PlannerPath.from_segments(reference.start, reference.heading, reference.segments,
                                         reference.resolution)
    return PlannerPath.from_waypoints(reference.waypoints, reference.resolution)


def required_path_length(scenario: Scenario) -> float:
    """Arc length the speed profile covers over the run plus one full horizon."""
    horizon_end = scenario.sim.duration + scenario.horizon.n_steps * scenario.horizon.ts
    samples = max(2, int(math.ceil(horizon_end * PROFILE_SAMPLES_PER_SECOND)) + 1)
    times = np.linspace(0.0, horizon_end, samples)
    speeds = scenario.reference.speed_at(times)
    return float(np.sum(0.5 * (speeds[1:] + speeds[:-1]) * np.diff(times)))


def agent_origin(agent: AgentSpec, path: PlannerPath) -> np.ndarray:
    """Global position of an agent at t = 0 from either a position or a (station, offset) pair."""
    if agent.position is not None:
        return np.array(agent.position, dtype=float)
    station, offset = agent.station
    x, y, heading, _ = path.sample(station)
    return np.array([x - offset * math.sin(heading), y + offset * math.cos(heading)])


def initial_state(scenario: Scenario, path: PlannerPath) -> VehicleState:
    sim = scenario.sim
    x, y, heading, curvature = (float(v) for v in path.sample(0.0))
    offset = sim.initial_lateral_offset
    kappa = float(np.clip(curvature, scenario.limits.kappa_min, scenario.limits.kappa_max))
    return VehicleState.from_array([x - offset * math.sin(heading), y + offset * math.cos(heading),
                                    heading + sim.initial_heading_offset, kappa, kappa])


class ClosedLoopSimulation:
    """One scenario run; holds the solver instance and the warm-start state."""

    def __init__(self, scenario: Scenario, solver_config: Optional[SolverConfig] = None):
        self.scenario = scenario
        self.horizon = scenario.horizon
        self.path = planner_path(scenario)
        required = required_path_length(scenario)
        if required > self.path.length + 1e-6:
            raise PathTooShortError(required, self.path.length)
        plant = scenario.sim.plant
        self.plant_model = ModelParams(scenario.model.wheelbase_b * plant.wheelbase_scale,
                                       scenario.model.tau * plant.tau_scale)
        self.solver = SqpSolver(solver_config or scenario.solver)
        self.origins = [agent_origin(agent, self.path) for agent in scenario.agents]
        self.velocities = [np.array(agent.velocity, dtype=float) for agent in scenario.agents]
        logger.debug("Scenario %s: safety parameters %s", scenario.name, class_params_table(scenario.safety))

    def agent_positions(self, times) -> List[np.ndarray]:
        times = np.atleast_1d(np.asarray(times, dtype=float))
        return [origin[None, :] + times[:, None] * velocity[None, :]
                for origin, velocity in zip(self.origins, self.velocities)]

    def object_tracks(self, reference, times):
        """Object tracks relative to the discretized reference plus the tube cuts they induce."""
        scenario = self.scenario
        footprint = scenario.footprint
        lane = scenario.road.lane_half_width
        tracks, cuts = [], []
        for agent, positions in zip(scenario.agents, self.agent_positions(times)):
            lon, lat = relative_coordinates(positions[:, 0], positions[:, 1], reference.x_bar, reference.y_bar,
                                            reference.theta_bar)
            half_length = 0.5 * agent.length + footprint.half_length
            d_lon = np.sign(lon) * np.maximum(np.abs(lon) - half_length, 0.0)
            inner_edge = np.abs(lat) - 0.5 * agent.width
            d_ref = np.maximum(inner_edge - footprint.half_width, 0.0)
            sides = tuple(Side.LEFT if value >= 0 else Side.RIGHT for value in lat)
            tracks.append(ObjectTrack(agent.id, agent.object_class, sides, d_ref, d_lon))
            intrusion = lane - inner_edge
            blocking = np.flatnonzero((intrusion > 0) & (np.abs(lon) <= half_length))
            cuts.extend(ObstacleCut(int(k), int(k), sides[k], float(intrusion[k])) for k in blocking)
        return tracks, cuts

    def build_problem(self, state: VehicleState, time_now: float, progress: float) -> MpcProblem:
        scenario = self.scenario
        horizon = self.horizon
        times = time_now + horizon.ts * np.arange(horizon.n_points)
        speeds = scenario.reference.speed_at(times)
        reference = discretize_reference(self.path, speeds, horizon, start_s=progress)
        tracks, cuts = self.object_tracks(reference, times)
        zones = zones_to_steps(scenario.road.shrink_zones, reference.arc_length)
        tube = build_tube(scenario.road.lane_half_width, cuts, zones, scenario.footprint.half_width,
                          n_points=horizon.n_points)
        clearance = select_most_constraining(tracks, scenario.safety, horizon.n_points, scenario.s_target)
        limits = scenario.limits
        if not limits.kappa_min <= state.kappa <= limits.kappa_max:
            logger.debug("Measured curvature %.4f saturated to the controller bounds", state.kappa)
            state = VehicleState(state.x, state.y, state.theta,
                                 float(np.clip(state.kappa, limits.kappa_min, limits.kappa_max)), state.kappa_des)
        return MpcProblem(horizon=horizon, model=scenario.model, weights=scenario.weights, limits=limits,
                          reference=reference, tube=tube, clearance=clearance, initial_state=state,
                          safety_params=scenario.safety, s_target=scenario.s_target)

    def run(self) -> SimTrace:
        scenario = self.scenario
        ts = self.horizon.ts
        n_cycles = int(round(scenario.sim.duration / ts))
        state = initial_state(scenario, self.path)
        trace = SimTrace(scenario_name=scenario.name, ts=ts, agent_ids=[agent.id for agent in scenario.agents])
        agent_rows = [[] for _ in scenario.agents]
        progress = self.path.project(state.x, state.y)
        previous = None
        degraded = 0

        for cycle in range(n_cycles):
            time_now = cycle * ts
            progress = self.path.project(state.x, state.y, hint=progress)
            problem = self.build_problem(state, time_now, progress)
            warm = warm_start_shift(previous, problem.initial_state, problem) if previous is not None else None
            solution, status = self.solver.solve(problem, warm)
            previous = solution.variables
            if status.outcome is not SolverOutcome.CONVERGED:
                degraded += 1

            u0 = solution.first_input.u
            reference = problem.reference
            e_lat = lateral_error((state.x, state.y), reference[0])
            variables = solution.variables
            trace.cycles.append(CycleRecord(
                time=time_now, state=state, u=u0, e_lat=e_lat,
                steering_angle=steering_angle(state.kappa, scenario.model),
                slack_0=float(variables.slacks[0]), max_slack=float(variables.slacks.max()),
                tube_lower_0=float(problem.tube.lower[0]), tube_upper_0=float(problem.tube.upper[0]),
                safety_0=float(variables.safety[0]), iterations=status.iterations,
                solve_ms=1e3 * status.wall_time, outcome=status.outcome, kkt_residual=status.kkt_residual,
                predicted_next=variables.states[1].copy()))

            for rows, positions, agent in zip(agent_rows, self.agent_positions(time_now), scenario.agents):
                lon, lat = relative_coordinates(positions[0, 0], positions[0, 1], state.x, state.y,
                                                reference.theta_bar[0])
                clearance = abs(float(lat)) - 0.5 * agent.width - scenario.footprint.half_width
                overlap = abs(float(lon)) < 0.5 * agent.length + scenario.footprint.half_length
                rows.append((float(lon), float(lat), clearance, overlap))

            logger.debug("t=%.2f e_lat=%.4f u=%.4f iters=%d %s", time_now, e_lat, u0, status.iterations,
                         status.outcome.value)
            state = plant_step(state, u0, reference.speeds[0], self.plant_model, ts,
                               actuation_lag=scenario.sim.plant.actuation_lag)

        for rows in agent_rows:
            columns = np.array(rows, dtype=float).reshape(-1, 4)
            trace.agent_longitudinal.append(columns[:, 0])
            trace.agent_lateral.append(columns[:, 1])
            trace.agent_clearance.append(columns[:, 2])
            trace.agent_overlap.append(columns[:, 3].astype(bool))
        trace.final_state = state
        if degraded:
            logger.warning("%s: %d of %d cycles ended without SQP convergence", scenario.name, degraded, n_cycles)
        return trace


def run_scenario(scenario: Scenario, solver_config: Optional[SolverConfig] = None) -> SimTrace:
    return ClosedLoopSimulation(scenario, solver_config).run()


def clearance_events(trace: SimTrace, agents: Optional[Sequence[str]] = None) -> List[ClearanceEvent]:
    """Lateral clearance of each agent when it passes from ahead of the vehicle to behind it.

    Values are linearly interpolated between the two cycles around the crossing;
    agents that are never passed produce no event.
    """
    wanted = set(agents) if agents is not None else None
    e_lat = trace.lateral_errors
    times = trace.times
    events = []
    for agent_id, lon, lat, clearance in zip(trace.agent_ids, trace.agent_longitudinal, trace.agent_lateral,
                                             trace.agent_clearance):
        if wanted is not None and agent_id not in wanted:
            continue
        crossings = np.flatnonzero((lon[:-1] > 0.0) & (lon[1:] <= 0.0))
        if crossings.size == 0:
            continue
        i = int(crossings[0])
        fraction = lon[i] / (lon[i] - lon[i + 1])

        def at_crossing(values):
            return float(values[i] + fraction * (values[i + 1] - values[i]))

        events.append(ClearanceEvent(agent_id=agent_id, time=at_crossing(times), clearance=at_crossing(clearance),
                                     e_lat=at_crossing(e_lat),
                                     side=Side.LEFT if at_crossing(lat) >= 0 else Side.RIGHT))
    return events


def warm_cycle_timing(trace: SimTrace) -> TimingStats:
    """Solve-time statistics over warm-started cycles (the first, cold cycle is skipped)."""
    samples = trace.solve_ms
    return TimingStats.from_samples(samples[1:] if len(samples) > 1 else samples)


def compare_biasing(scenario: Scenario, solver_config: Optional[SolverConfig] = None) -> BiasingComparison:
    """Run the scenario as configured and with alpha = 0, then pair up the clearance events.

    A scenario that already has alpha = 0 is run once and that run fills both
    sides of the comparison.
    """
    biasing = scenario.weights.alpha > 0
    if biasing:
        biased = run_scenario(scenario, solver_config)
        unbiased = run_scenario(scenario.with_alpha(0.0), solver_config)
    else:
        logger.warning("%s has alpha = 0; comparing the unbiased run with itself", scenario.name)
        biased = unbiased = run_scenario(scenario, solver_config)
    biased_events = clearance_events(biased)
    unbiased_events = clearance_events(unbiased)

    unbiased_by_agent = {event.agent_id: event for event in unbiased_events}
    pairs = [ClearancePair(event.agent_id, event.clearance, unbiased_by_agent[event.agent_id].clearance)
             for event in biased_events if event.agent_id in unbiased_by_agent]
    min_biased = min((event.clearance for event in biased_events), default=None)
    min_unbiased = min((event.clearance for event in unbiased_events), default=None)
    improvement = None
    if min_biased is not None and min_unbiased is not None and min_unbiased > 0:
        improvement = 100.0 * (min_biased / min_unbiased - 1.0)

    count = min(len(biased), len(unbiased))
    path_delta = float(np.max(np.linalg.norm(biased.positions[:count] - unbiased.positions[:count], axis=1),
                              initial=0.0))
    timing = {'biased': warm_cycle_timing(biased), 'unbiased': warm_cycle_timing(unbiased)}
    logger.info("%s: min clearance %s (biased) vs %s (unbiased), path delta %.2e m", scenario.name,
                min_biased, min_unbiased, path_delta)
    return BiasingComparison(biased=biased, unbiased=unbiased, biased_events=biased_events,
                             unbiased_events=unbiased_events, pairs=pairs, min_clearance_biased=min_biased,
                             min_clearance_unbiased=min_unbiased, improvement_pct=improvement,
                             path_delta_max=path_delta, timing=timing, biasing=biasing)
