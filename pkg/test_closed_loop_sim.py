import dataclasses
import math
import unittest

import numpy as np

from models import (ClearanceEvent, CycleRecord, ObjectClass, Side, SimOptions, SimTrace, SolverOutcome,
                    VehicleState)
from utils.closed_loop_sim import (ClosedLoopSimulation, agent_origin, clearance_events, compare_biasing,
                                   initial_state, planner_path, required_path_length, run_scenario,
                                   warm_cycle_timing)
from utils.errors import PathTooShortError, ScenarioError
from utils.scenario_loader import parse_scenario

BASE_SCENARIO = """
name: short_straight
model: {wheelbase: 2.7, tau: 0.3}
limits: {u_min: -0.15, u_max: 0.15}
weights: {q1: 1.0, q2: 2.0, q3: 1.0, p1: 1.0, p2: 2.0, p3: 1.0, r: 0.5, alpha: 10.0}
horizon: {n: 20, ts: 0.05}
road: {lane_half_width: 2.2}
reference:
  segments:
    - {type: straight, length: 60.0}
  speed: 5.0
sim: {duration: 4.0}
"""


def short_scenario(*overrides):
    return parse_scenario(BASE_SCENARIO, overrides=overrides)


def synthetic_trace(longitudinal, lateral, clearance):
    trace = SimTrace(scenario_name='synthetic', ts=0.1, agent_ids=['a'])
    for k in range(len(longitudinal)):
        trace.cycles.append(CycleRecord(time=0.1 * k, state=VehicleState(k, 0, 0, 0, 0), u=0.0, e_lat=0.01 * k,
                                        steering_angle=0.0, slack_0=0.0, max_slack=0.0, tube_lower_0=-1.0,
                                        tube_upper_0=1.0, safety_0=1.0, iterations=1, solve_ms=float(k + 1),
                                        outcome=SolverOutcome.CONVERGED, kkt_residual=0.0,
                                        predicted_next=np.zeros(5)))
    trace.agent_longitudinal.append(np.asarray(longitudinal, dtype=float))
    trace.agent_lateral.append(np.asarray(lateral, dtype=float))
    trace.agent_clearance.append(np.asarray(clearance, dtype=float))
    trace.agent_overlap.append(np.abs(np.asarray(longitudinal)) < 2.5)
    return trace


class TestScenarioGeometry(unittest.TestCase):
    """Planner path, start state and agent placement"""

    def test_required_length(self):
        """Duration plus one horizon at 5 m/s needs 25 m of path"""
        self.assertAlmostEqual(required_path_length(short_scenario()), 25.0, places=9)

    def test_ramp_required_length(self):
        """A linear speed ramp integrates to the trapezoid area"""
        scenario = short_scenario()
        scenario = dataclasses.replace(scenario, reference=dataclasses.replace(
            scenario.reference, speed_profile=((0.0, 0.0), (5.0, 10.0))))
        self.assertAlmostEqual(required_path_length(scenario), 25.0, places=6)

    def test_initial_offset(self):
        """The start state is shifted along the path normal"""
        scenario = short_scenario('sim.initial_lateral_offset=0.5', 'reference.heading=1.5707963267948966')
        state = initial_state(scenario, planner_path(scenario))
        self.assertAlmostEqual(state.x, -0.5, places=12)
        self.assertAlmostEqual(state.y, 0.0, places=12)
        self.assertEqual(state.kappa, state.kappa_des)

    def test_agent_station(self):
        """Station placement puts an agent beside the path at the given offset"""
        scenario = short_scenario('agents=[{id: p, class: pedestrian, station: [12.0, -2.5]}]')
        self.assertEqual(scenario.agents[0].object_class, ObjectClass.PEDESTRIAN)
        np.testing.assert_allclose(agent_origin(scenario.agents[0], planner_path(scenario)), [12.0, -2.5])

    def test_path_too_short(self):
        """A run longer than the path is refused before the first cycle"""
        scenario = dataclasses.replace(short_scenario(), sim=SimOptions(duration=100.0))
        with self.assertRaises(PathTooShortError):
            ClosedLoopSimulation(scenario)
        with self.assertRaises(ScenarioError):
            short_scenario('sim.duration=100')


class TestProblemRefresh(unittest.TestCase):
    """Per-cycle reference, tube and object data"""

    def test_logs_class_parameters(self):
        """The simulation logs the per-class safety parameters it runs with"""
        with self.assertLogs('utils.closed_loop_sim', 'DEBUG') as logs:
            ClosedLoopSimulation(short_scenario('safety.car={a: 3.0, b: 1.0, c: 0.4}'))
        self.assertTrue(any("'car': {'a': 3.0, 'b': 1.0, 'c': 0.4" in line for line in logs.output))

    def test_static_agent_track(self):
        """A pedestrian 2.6 m left is 1.4 m from the footprint edge and does not cut the lane"""
        scenario = short_scenario('agents=[{id: p, class: pedestrian, station: [10.0, 2.6]}]')
        simulation = ClosedLoopSimulation(scenario)
        reference = simulation.build_problem(initial_state(scenario, simulation.path), 0.0, 0.0).reference
        times = 0.05 * np.arange(21)
        tracks, cuts = simulation.object_tracks(reference, times)
        np.testing.assert_allclose(tracks[0].d_ref, 1.4, atol=1e-12)
        self.assertAlmostEqual(tracks[0].d_lon[0], 10.0 - 0.3 - 2.2, places=12)
        self.assertEqual(set(tracks[0].sides), {Side.LEFT})
        self.assertEqual(cuts, [])

    def test_intruding_agent_cuts_tube(self):
        """An agent inside the lane moves the upper bound in while it overlaps longitudinally"""
        scenario = short_scenario('agents=[{id: box, class: generic, station: [3.1, 1.5]}]')
        simulation = ClosedLoopSimulation(scenario)
        problem = simulation.build_problem(initial_state(scenario, simulation.path), 0.0, 0.0)
        np.testing.assert_allclose(problem.tube.upper[:3], 1.3, atol=1e-12)
        np.testing.assert_allclose(problem.tube.upper[3:], 0.3, atol=1e-12)
        np.testing.assert_allclose(problem.tube.lower, -1.3, atol=1e-12)

    def test_moving_agent_prediction(self):
        """Agents move with their scripted constant velocity"""
        scenario = short_scenario('agents=[{id: bike, class: bicycle, position: [5.0, 2.7], velocity: [2.0, 0.0]}]')
        positions = ClosedLoopSimulation(scenario).agent_positions([0.0, 1.5])[0]
        np.testing.assert_allclose(positions, [[5.0, 2.7], [8.0, 2.7]])

    def test_curvature_clipped_to_bounds(self):
        """A measured curvature outside the bounds is saturated for the controller"""
        scenario = short_scenario()
        simulation = ClosedLoopSimulation(scenario)
        problem = simulation.build_problem(VehicleState(0.0, 0.0, 0.0, 0.4, 0.0), 0.0, 0.0)
        self.assertEqual(problem.initial_state.kappa, scenario.limits.kappa_max)


class TestClosedLoop(unittest.TestCase):
    """Receding-horizon runs"""

    @classmethod
    def setUpClass(cls):
        cls.scenario = short_scenario('sim.initial_lateral_offset=0.4',
                                      'agents=[{id: p, class: pedestrian, station: [10.0, 2.6]}]')
        cls.trace = run_scenario(cls.scenario)

    def test_cycle_count(self):
        """One record per sampling period with monotone timestamps"""
        self.assertEqual(len(self.trace), 80)
        np.testing.assert_allclose(np.diff(self.trace.times), 0.05)

    def test_inputs_within_limits(self):
        """Applied inputs respect the curvature-rate bounds"""
        self.assertLessEqual(np.abs(self.trace.inputs).max(), 0.15 + 1e-12)

    def test_plant_stays_in_tube(self):
        """The lateral error leaves the tube by at most the recorded slack"""
        for cycle in self.trace.cycles:
            self.assertGreaterEqual(cycle.e_lat, cycle.tube_lower_0 - cycle.slack_0 - 1e-9)
            self.assertLessEqual(cycle.e_lat, cycle.tube_upper_0 + cycle.slack_0 + 1e-9)

    def test_one_step_prediction(self):
        """Without model mismatch the predicted stage-1 state is what the plant reaches"""
        for current, following in zip(self.trace.cycles, self.trace.cycles[1:]):
            measured = following.state.as_array()
            predicted = current.predicted_next
            np.testing.assert_allclose(predicted[[0, 1, 3, 4]], measured[[0, 1, 3, 4]], atol=1e-9)
            self.assertLess(abs(math.remainder(predicted[2] - measured[2], 2 * math.pi)), 1e-9)

    def test_deterministic(self):
        """Running the same scenario twice gives an identical trace"""
        again = run_scenario(self.scenario)
        np.testing.assert_array_equal(again.positions, self.trace.positions)
        np.testing.assert_array_equal(again.inputs, self.trace.inputs)

    def test_collision_free(self):
        """The vehicle never overlaps the pedestrian"""
        self.assertTrue(self.trace.collision_free)
        self.assertEqual(len(self.trace.agent_clearance[0]), len(self.trace))

    def test_without_actuation_lag(self):
        """With the lag switched off the plant curvature always equals the command"""
        trace = run_scenario(short_scenario('sim.initial_lateral_offset=0.4', 'sim.plant.actuation_lag=false',
                                            'sim.duration=1.0'))
        for cycle in trace.cycles:
            self.assertAlmostEqual(cycle.state.kappa, cycle.state.kappa_des, places=12)


class TestClearanceEvents(unittest.TestCase):
    """Clearance at zero longitudinal displacement"""

    def test_interpolated_crossing(self):
        """Values are interpolated linearly between the cycles around the crossing"""
        trace = synthetic_trace([2.0, 1.0, -1.0, -2.0], [2.0, 2.0, 2.2, 2.2], [1.0, 1.0, 1.4, 1.4])
        events = clearance_events(trace)
        self.assertEqual(len(events), 1)
        self.assertAlmostEqual(events[0].time, 0.15, places=12)
        self.assertAlmostEqual(events[0].clearance, 1.2, places=12)
        self.assertAlmostEqual(events[0].e_lat, 0.015, places=12)
        self.assertIs(events[0].side, Side.LEFT)

    def test_agent_never_passed(self):
        """Agents that stay ahead or behind produce no event"""
        self.assertEqual(clearance_events(synthetic_trace([-1.0, -2.0, -3.0], [1, 1, 1], [0.5, 0.5, 0.5])), [])
        self.assertEqual(clearance_events(synthetic_trace([5.0, 4.0, 3.0], [1, 1, 1], [0.5, 0.5, 0.5])), [])

    def test_agent_filter(self):
        """Only requested agents are reported"""
        trace = synthetic_trace([1.0, -1.0], [-2.0, -2.0], [0.8, 0.8])
        self.assertEqual(clearance_events(trace, agents=['other']), [])
        self.assertIs(clearance_events(trace, agents=['a'])[0].side, Side.RIGHT)

    def test_warm_timing_skips_first_cycle(self):
        """The cold first solve is excluded from the timing statistics"""
        timing = warm_cycle_timing(synthetic_trace([3.0, 2.0, 1.0], [1, 1, 1], [1, 1, 1]))
        self.assertEqual(timing.samples, 2)
        self.assertAlmostEqual(timing.average_ms, 2.5, places=12)
        self.assertAlmostEqual(timing.maximum_ms, 3.0, places=12)

    def test_static_agent_beside_straight_pass(self):
        """Without biasing the vehicle holds the reference and the clearance is the geometric gap"""
        scenario = short_scenario('weights.alpha=0', 'agents=[{id: p, class: pedestrian, station: [10.0, 2.6]}]')
        events = clearance_events(run_scenario(scenario))
        self.assertEqual([event.agent_id for event in events], ['p'])
        self.assertIsInstance(events[0], ClearanceEvent)
        self.assertAlmostEqual(events[0].clearance, 2.6 - 0.3 - 0.9, delta=1e-3)
        self.assertAlmostEqual(events[0].time, 10.0 / 5.0, delta=1e-6)

    def test_agent_behind(self):
        """An agent behind the start is never passed"""
        scenario = short_scenario('sim.duration=1.0', 'agents=[{id: q, class: car, position: [-15.0, 3.0]}]')
        self.assertEqual(clearance_events(run_scenario(scenario)), [])


class TestCompareBiasing(unittest.TestCase):
    """Biased against alpha = 0 runs"""

    def test_biased_clearance_larger(self):
        """Biasing passes a single pedestrian with more room"""
        comparison = compare_biasing(short_scenario('agents=[{id: p, class: pedestrian, station: [10.0, 2.6]}]'))
        self.assertEqual(len(comparison.pairs), 1)
        self.assertGreater(comparison.pairs[0].biased, comparison.pairs[0].unbiased)
        self.assertGreater(comparison.improvement_pct, 0.0)
        self.assertEqual(set(comparison.timing), {'biased', 'unbiased'})

    def test_no_agents(self):
        """Without agents both runs coincide and no clearance is reported"""
        comparison = compare_biasing(short_scenario('sim.duration=2.0', 'sim.initial_lateral_offset=0.3'))
        self.assertEqual(comparison.pairs, [])
        self.assertIsNone(comparison.improvement_pct)
        self.assertLess(comparison.path_delta_max, 1e-6)

    def test_unbiased_scenario_compares_with_itself(self):
        """A scenario with alpha = 0 is run once and fills both sides"""
        scenario = short_scenario('weights.alpha=0', 'agents=[{id: p, class: pedestrian, station: [10.0, 2.6]}]')
        with self.assertLogs('utils.closed_loop_sim', 'WARNING'):
            comparison = compare_biasing(scenario)
        self.assertFalse(comparison.biasing)
        self.assertIs(comparison.biased, comparison.unbiased)
        self.assertEqual(len(comparison.pairs), 1)
        self.assertEqual(comparison.pairs[0].biased, comparison.pairs[0].unbiased)
        self.assertAlmostEqual(comparison.improvement_pct, 0.0, places=12)
        self.assertEqual(comparison.path_delta_max, 0.0)
        self.assertEqual(comparison.timing['biased'], comparison.timing['unbiased'])


if __name__ == '__main__':
    unittest.main()
