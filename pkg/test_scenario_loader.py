import tempfile
import unittest
from pathlib import Path

import yaml

from models import ObjectClass, PathSegment, RoadShrinkZone
from utils.errors import OutputError, ScenarioError
from utils.scenario_loader import (apply_overrides, dump_scenario, load_scenario, parse_scenario,
                                   scenario_from_document, write_scenario)

SCENARIOS = Path(__file__).resolve().parent / 'scenarios'

FULL_SCENARIO = """name: loader_check
model: {wheelbase: 2.7, tau: 0.3}
footprint: {length: 4.0, width: 1.7}
limits: {u_min: -0.2, u_max: 0.2, kappa_min: -0.3, kappa_max: 0.3, s_min: 0.1}
weights: {q1: 1, q2: 2.0, q3: 1.0, p1: 1.0, p2: 2.0, p3: 1.0, r: 0.5, alpha: 10.0}
safety:
  s_target: 1.5
  car: {a: 2.5, b: 1.0, c: 0.15}
horizon: {n: 20, ts: 0.05}
road:
  lane_half_width: 2.2
  shrink_zones:
    - {start: 20.0, end: 25.0, half_width: 1.6, taper: 3.0}
reference:
  start: [1.0, -2.0]
  heading: 0.1
  segments:
    - {type: straight, length: 30.0}
    - {type: arc, radius: 40.0, angle: 0.5}
  speed_profile: [[0.0, 4.0], [2.0, 6.0]]
agents:
  - {id: walker, class: pedestrian, station: [12.0, 2.5]}
  - {id: van, class: car, length: 5.0, width: 2.0, position: [30.0, -3.0], velocity: [1.0, 0.0]}
sim:
  duration: 4.0
  initial_lateral_offset: 0.3
  plant: {actuation_lag: false, tau_scale: 1.2}
solver: {max_sqp_iterations: 15, kkt_tolerance: 1.0e-7}
"""

MINIMAL_SCENARIO = """model: {wheelbase: 2.7, tau: 0.3}
horizon: {n: 10, ts: 0.05}
road: {lane_half_width: 2.0}
reference:
  segments:
    - {type: straight, length: 40.0}
sim: {duration: 2.0}
"""


class TestParseScenario(unittest.TestCase):
    """Scenario documents to validated Scenario objects"""

    def test_full_document(self):
        """Every section lands in the matching Scenario field"""
        scenario = parse_scenario(FULL_SCENARIO)
        self.assertEqual(scenario.name, 'loader_check')
        self.assertEqual(scenario.model.wheelbase_b, 2.7)
        self.assertEqual(scenario.footprint.half_width, 0.85)
        self.assertEqual(scenario.limits.s_min, 0.1)
        self.assertEqual(scenario.weights.q1, 1.0)
        self.assertIsInstance(scenario.weights.q1, float)
        self.assertEqual(scenario.s_target, 1.5)
        self.assertEqual(scenario.safety[ObjectClass.CAR].lateral.a, 2.5)
        self.assertEqual(scenario.safety[ObjectClass.CAR].longitudinal.s_target, 1.5)
        self.assertEqual(scenario.safety[ObjectClass.PEDESTRIAN].lateral.b, 1.5)
        self.assertEqual(scenario.road.shrink_zones, (RoadShrinkZone(20.0, 25.0, 1.6, 3.0),))
        self.assertEqual(scenario.reference.segments[1], PathSegment('arc', radius=40.0, angle=0.5))
        self.assertEqual(scenario.reference.speed_profile, ((0.0, 4.0), (2.0, 6.0)))
        self.assertEqual([agent.id for agent in scenario.agents], ['walker', 'van'])
        self.assertEqual(scenario.agents[0].station, (12.0, 2.5))
        self.assertIsNone(scenario.agents[0].position)
        self.assertEqual(scenario.agents[1].velocity, (1.0, 0.0))
        self.assertFalse(scenario.sim.plant.actuation_lag)
        self.assertEqual(scenario.sim.plant.wheelbase_scale, 1.0)
        self.assertEqual(scenario.solver.max_sqp_iterations, 15)

    def test_defaults(self):
        """Optional sections fall back to their documented defaults"""
        scenario = parse_scenario(MINIMAL_SCENARIO, default_name='minimal')
        self.assertEqual(scenario.name, 'minimal')
        self.assertEqual(scenario.footprint.length, 4.4)
        self.assertEqual(scenario.agents, ())
        self.assertEqual(scenario.s_target, 1.0)
        self.assertEqual(scenario.reference.speed_profile, ((0.0, 5.0),))
        self.assertEqual(scenario.reference.resolution, 0.25)
        self.assertTrue(scenario.sim.plant.actuation_lag)

    def test_missing_required_key_names_field_and_line(self):
        """A missing wheelbase is reported with its field path and the line of its section"""
        text = MINIMAL_SCENARIO.replace('model: {wheelbase: 2.7, tau: 0.3}', 'model: {tau: 0.3}')
        with self.assertRaises(ScenarioError) as ctx:
            parse_scenario(text, source='broken.yaml')
        self.assertEqual(ctx.exception.field, 'model.wheelbase')
        self.assertEqual(ctx.exception.line, 1)
        self.assertIn('broken.yaml', str(ctx.exception))
        self.assertIn('line 1', str(ctx.exception))

    def test_missing_section(self):
        """Required sections must be present"""
        text = MINIMAL_SCENARIO.replace('sim: {duration: 2.0}\n', '')
        with self.assertRaises(ScenarioError) as ctx:
            parse_scenario(text)
        self.assertEqual(ctx.exception.field, 'sim')

    def test_unknown_key_rejected(self):
        """Misspelled keys are errors, not silently ignored"""
        text = MINIMAL_SCENARIO.replace('horizon: {n: 10, ts: 0.05}', 'horizon: {n: 10, ts: 0.05, dt: 0.1}')
        with self.assertRaises(ScenarioError) as ctx:
            parse_scenario(text)
        self.assertEqual(ctx.exception.field, 'horizon.dt')
        self.assertEqual(ctx.exception.line, 2)

    def test_wrong_types(self):
        """Booleans and strings are not numbers and floats are not step counts"""
        for old, new in (('ts: 0.05', 'ts: fast'), ('n: 10', 'n: 10.5'), ('wheelbase: 2.7', 'wheelbase: true')):
            with self.assertRaises(ScenarioError):
                parse_scenario(MINIMAL_SCENARIO.replace(old, new))

    def test_invalid_values(self):
        """Domain invariants surface as scenario errors on the offending field"""
        cases = (
            ('model: {wheelbase: 2.7, tau: 0.3}', 'model: {wheelbase: -1.0, tau: 0.3}', 'model'),
            ('road: {lane_half_width: 2.0}', 'road: {lane_half_width: 0.0}', 'road.lane_half_width'),
            ('sim: {duration: 2.0}', 'sim: {duration: 2.0, plant: {tau_scale: 0.0}}', 'sim.plant'),
        )
        for old, new, field in cases:
            with self.assertRaises(ScenarioError) as ctx:
                parse_scenario(MINIMAL_SCENARIO.replace(old, new))
            self.assertEqual(ctx.exception.field, field)

    def test_s_min_must_stay_below_target(self):
        """A lower safety bound at or above s_target is refused"""
        with self.assertRaises(ScenarioError) as ctx:
            parse_scenario(MINIMAL_SCENARIO + "limits: {s_min: 1.0}\n")
        self.assertEqual(ctx.exception.field, 'limits.s_min')

    def test_agent_rules(self):
        """Agents need unique ids, a known class and exactly one placement"""
        bad_agents = (
            "agents:\n  - {id: a, station: [5.0, 2.0]}\n  - {id: a, station: [9.0, 2.0]}\n",
            "agents:\n  - {id: a, class: truck, station: [5.0, 2.0]}\n",
            "agents:\n  - {id: a, station: [5.0, 2.0], position: [5.0, 2.0]}\n",
            "agents:\n  - {id: a}\n",
        )
        for extra in bad_agents:
            with self.assertRaises(ScenarioError):
                parse_scenario(MINIMAL_SCENARIO + extra)

    def test_path_choice_and_speed_choice(self):
        """Segments and waypoints are exclusive, so are speed and speed_profile"""
        both_paths = MINIMAL_SCENARIO.replace('reference:\n', 'reference:\n  waypoints: [[0, 0], [40, 0]]\n')
        with self.assertRaises(ScenarioError):
            parse_scenario(both_paths)
        both_speeds = MINIMAL_SCENARIO.replace('reference:\n',
                                               'reference:\n  speed: 4.0\n  speed_profile: [[0, 4.0]]\n')
        with self.assertRaises(ScenarioError):
            parse_scenario(both_speeds)
        decreasing = MINIMAL_SCENARIO.replace('reference:\n', 'reference:\n  speed_profile: [[1, 4.0], [0, 5.0]]\n')
        with self.assertRaises(ScenarioError):
            parse_scenario(decreasing)

    def test_path_shorter_than_run(self):
        """The reference must cover the duration plus one horizon"""
        with self.assertRaises(ScenarioError) as ctx:
            parse_scenario(MINIMAL_SCENARIO, overrides=['sim.duration=10'])
        self.assertEqual(ctx.exception.field, 'reference')
        self.assertIn('needs', str(ctx.exception))

    def test_invalid_yaml(self):
        """Syntax errors carry the line of the problem"""
        with self.assertRaises(ScenarioError) as ctx:
            parse_scenario("model: {wheelbase: 2.7\nhorizon: [1, 2\n")
        self.assertIsNotNone(ctx.exception.line)
        with self.assertRaises(ScenarioError):
            parse_scenario("")

    def test_top_level_must_be_mapping(self):
        """A list document is not a scenario"""
        with self.assertRaises(ScenarioError):
            scenario_from_document([1, 2, 3])


class TestOverrides(unittest.TestCase):
    """Command-line `--set key=value` assignments"""

    def test_dotted_paths(self):
        """Dotted keys reach nested fields and YAML rules type the values"""
        scenario = parse_scenario(FULL_SCENARIO, overrides=['weights.alpha=0', 'sim.plant.actuation_lag=true',
                                                            'agents.1.class=bicycle'])
        self.assertEqual(scenario.weights.alpha, 0.0)
        self.assertTrue(scenario.sim.plant.actuation_lag)
        self.assertEqual(scenario.agents[1].object_class, ObjectClass.BICYCLE)

    def test_list_index(self):
        """Integer parts index lists"""
        scenario = parse_scenario(MINIMAL_SCENARIO, overrides=['reference.segments.0.length=80'])
        self.assertEqual(scenario.reference.segments[0].length, 80.0)

    def test_bare_key_resolves_to_unique_section(self):
        """A key found in exactly one section needs no prefix"""
        scenario = parse_scenario(FULL_SCENARIO, overrides=['alpha=2.5', 'duration=3.0'])
        self.assertEqual(scenario.weights.alpha, 2.5)
        self.assertEqual(scenario.sim.duration, 3.0)

    def test_structured_value(self):
        """Flow-style YAML values replace whole sections"""
        scenario = parse_scenario(MINIMAL_SCENARIO, overrides=['agents=[{id: p, class: car, station: [10, -3]}]'])
        self.assertEqual(scenario.agents[0].object_class, ObjectClass.CAR)

    def test_missing_sections_are_created(self):
        """Assigning below an absent section creates it"""
        document = apply_overrides({}, ['weights.r=3'])
        self.assertEqual(document, {'weights': {'r': 3}})

    def test_bad_overrides(self):
        """Malformed assignments are scenario errors"""
        for item in ('alpha', '=3', 'reference.segments.7.length=1', 'horizon.n.deep=1'):
            with self.assertRaises(ScenarioError):
                parse_scenario(MINIMAL_SCENARIO, overrides=[item])

    def test_unknown_bare_key(self):
        """A bare key owned by no section stays top-level and fails validation"""
        with self.assertRaises(ScenarioError) as ctx:
            parse_scenario(MINIMAL_SCENARIO, overrides=['gamma=1'])
        self.assertEqual(ctx.exception.field, 'gamma')


class TestScenarioFiles(unittest.TestCase):
    """Reading and writing scenario files"""

    def test_dump_parses_back_to_equal_scenario(self):
        """A dumped scenario parses back to an equal Scenario"""
        scenario = parse_scenario(FULL_SCENARIO)
        again = parse_scenario(yaml.safe_dump(dump_scenario(scenario), sort_keys=False))
        self.assertEqual(again, scenario)

    def test_write_and_load(self):
        """write_scenario output loads through load_scenario"""
        scenario = parse_scenario(FULL_SCENARIO)
        with tempfile.TemporaryDirectory() as tmp:
            path = write_scenario(scenario, Path(tmp) / 'copy.yaml')
            self.assertEqual(load_scenario(path), scenario)

    def test_file_stem_is_default_name(self):
        """Unnamed scenarios take the file name"""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'narrow_lane.yaml'
            path.write_text(MINIMAL_SCENARIO, encoding='utf-8')
            self.assertEqual(load_scenario(path).name, 'narrow_lane')

    def test_missing_file(self):
        """An unreadable file is a filesystem error"""
        with self.assertRaises(OutputError):
            load_scenario(SCENARIOS / 'does_not_exist.yaml')

    def test_shipped_scenarios_load(self):
        """Every bundled scenario validates"""
        paths = sorted(SCENARIOS.glob('*.yaml')) + sorted((SCENARIOS / 'suite').glob('*.yaml'))
        self.assertGreaterEqual(len(paths), 13)
        for path in paths:
            scenario = load_scenario(path)
            self.assertEqual(scenario.name, path.stem)

    def test_annotated_example(self):
        """The two-pedestrian example places one agent on each side"""
        scenario = load_scenario(SCENARIOS / 'two_pedestrians.yaml')
        self.assertEqual(scenario.horizon.n_steps, 60)
        self.assertEqual([agent.station[1] > 0 for agent in scenario.agents], [True, False])
        self.assertEqual({agent.object_class for agent in scenario.agents}, {ObjectClass.PEDESTRIAN})


if __name__ == '__main__':
    unittest.main()
