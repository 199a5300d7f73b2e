"""
Scenario files: YAML parsing, strict validation, dotted-path overrides and
serialization back to a document.

Every problem is reported as a ScenarioError naming the file, the line (when
the offending node exists in the source text) and the dotted field path.
"""
import logging
import math
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence

import yaml

from config import create_solver_config
from models import (AgentSpec, ClassSafetyParams, CostWeights, Footprint, HorizonConfig, Limits, ModelParams,
                    ObjectClass, PathSegment, PlantOptions, ReferenceConfig, RoadConfig, RoadShrinkZone, Scenario,
                    SimOptions, SolverConfig)
from utils.closed_loop_sim import planner_path, required_path_length
from utils.errors import InvalidProblemError, OutputError, ScenarioError

logger = logging.getLogger(__name__)

REQUIRED = object()

SECTIONS = ('name', 'model', 'footprint', 'limits', 'weights', 'safety', 'horizon', 'road', 'reference',
            'agents', 'sim', 'solver')
REQUIRED_SECTIONS = ('model', 'horizon', 'road', 'reference', 'sim')

# document key -> CostWeights field
WEIGHT_FIELDS = {'q1': 'q1', 'q2': 'q2', 'q3': 'q3', 'p1': 'p1', 'p2': 'p2', 'p3': 'p3', 'r': 'r_input',
                 'alpha': 'alpha', 'slack_linear': 'slack_linear', 'slack_quadratic': 'slack_quadratic'}
LIMIT_FIELDS = ('u_min', 'u_max', 'kappa_min', 'kappa_max', 's_min')
SOLVER_FIELDS = tuple(SolverConfig.__dataclass_fields__)
CLASS_DEFAULTS = {'a': 2.0, 'b': 1.5, 'c': 0.2}


def _line_index(node, path=(), lines=None) -> Dict[tuple, int]:
    """Map dotted paths of a composed YAML tree to 1-based source lines."""
    if lines is None:
        lines = {}
    if node is None:
        return lines
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            _line_index(value_node, path + (str(key_node.value),), lines)
    elif isinstance(node, yaml.SequenceNode):
        for index, item in enumerate(node.value):
            _line_index(item, path + (str(index),), lines)
    return lines


class _DocumentReader:
    """Typed access to the raw document with error locations."""

    def __init__(self, source, lines):
        self.source = source
        self.lines = lines

    def error(self, message, path) -> ScenarioError:
        path = tuple(str(part) for part in path)
        line = None
        for length in range(len(path), -1, -1):
            if path[:length] in self.lines:
                line = self.lines[path[:length]]
                break
        return ScenarioError(message, source=self.source, line=line, field='.'.join(path) or None)

    def mapping(self, value, path, allowed: Iterable[str], required: Sequence[str] = ()) -> dict:
        if value is None:
            value = {}
        if not isinstance(value, dict):
            raise self.error("expected a mapping", path)
        allowed = set(allowed)
        for key in value:
            if key not in allowed:
                raise self.error(f"unknown key '{key}' (allowed: {', '.join(sorted(allowed))})", path + (key,))
        for key in required:
            if key not in value:
                raise self.error(f"missing required key '{key}'", path + (key,))
        return value

    def number(self, mapping, key, path, default=REQUIRED) -> float:
        if key not in mapping:
            if default is REQUIRED:
                raise self.error(f"missing required key '{key}'", path + (key,))
            return default
        value = mapping[key]
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise self.error(f"expected a finite number, got {value!r}", path + (key,))
        return float(value)

    def integer(self, mapping, key, path, default=REQUIRED) -> int:
        if key not in mapping:
            if default is REQUIRED:
                raise self.error(f"missing required key '{key}'", path + (key,))
            return default
        value = mapping[key]
        if isinstance(value, bool) or not isinstance(value, int):
            raise self.error(f"expected an integer, got {value!r}", path + (key,))
        return value

    def boolean(self, mapping, key, path, default) -> bool:
        value = mapping.get(key, default)
        if not isinstance(value, bool):
            raise self.error(f"expected true or false, got {value!r}", path + (key,))
        return value

    def pair(self, value, path):
        if (not isinstance(value, (list, tuple)) or len(value) != 2
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)):
            raise self.error(f"expected a pair of numbers, got {value!r}", path)
        return float(value[0]), float(value[1])

    def sequence(self, value, path) -> list:
        if value is None:
            return []
        if not isinstance(value, list):
            raise self.error("expected a list", path)
        return value


def _build(reader, path, factory, *args, **kwargs):
    """Construct a domain object, relocating its invariant errors to the document field."""
    try:
        return factory(*args, **kwargs)
    except InvalidProblemError as exc:
        raise reader.error(str(exc), path) from exc


def _parse_safety(reader, raw, s_target_default=1.0):
    path = ('safety',)
    classes = [object_class.value for object_class in ObjectClass]
    section = reader.mapping(raw, path, ['s_target'] + classes)
    s_target = reader.number(section, 's_target', path, s_target_default)
    table = {}
    for object_class in ObjectClass:
        class_path = path + (object_class.value,)
        entry = reader.mapping(section.get(object_class.value), class_path, CLASS_DEFAULTS)
        values = {key: reader.number(entry, key, class_path, default) for key, default in CLASS_DEFAULTS.items()}
        table[object_class] = _build(reader, class_path, ClassSafetyParams.build, s_target=s_target, **values)
    return s_target, table


def _parse_segments(reader, raw, path):
    segments = []
    for index, item in enumerate(reader.sequence(raw, path)):
        item_path = path + (index,)
        kind = item.get('type') if isinstance(item, dict) else None
        if kind == 'straight':
            entry = reader.mapping(item, item_path, ('type', 'length'), ('length',))
            segments.append(PathSegment('straight', length=reader.number(entry, 'length', item_path)))
        elif kind == 'arc':
            entry = reader.mapping(item, item_path, ('type', 'radius', 'angle'), ('radius', 'angle'))
            radius = reader.number(entry, 'radius', item_path)
            if radius <= 0:
                raise reader.error("arc radius must be > 0", item_path + ('radius',))
            segments.append(PathSegment('arc', radius=radius, angle=reader.number(entry, 'angle', item_path)))
        else:
            raise reader.error(f"segment type must be 'straight' or 'arc', got {kind!r}", item_path + ('type',))
        if segments[-1].kind == 'straight' and segments[-1].length <= 0:
            raise reader.error("segment length must be > 0", item_path + ('length',))
    return tuple(segments)


def _parse_reference(reader, raw):
    path = ('reference',)
    section = reader.mapping(raw, path, ('start', 'heading', 'segments', 'waypoints', 'resolution', 'speed',
                                         'speed_profile'))
    has_segments, has_waypoints = 'segments' in section, 'waypoints' in section
    if has_segments == has_waypoints:
        raise reader.error("exactly one of 'segments' or 'waypoints' is required", path)
    start = reader.pair(section.get('start', [0.0, 0.0]), path + ('start',))
    heading = reader.number(section, 'heading', path, 0.0)
    resolution = reader.number(section, 'resolution', path, 0.25)
    if resolution <= 0:
        raise reader.error("resolution must be > 0", path + ('resolution',))

    segments, waypoints = (), ()
    if has_segments:
        segments = _parse_segments(reader, section['segments'], path + ('segments',))
        if not segments:
            raise reader.error("at least one segment is required", path + ('segments',))
    else:
        waypoints = tuple(reader.pair(point, path + ('waypoints', i))
                          for i, point in enumerate(reader.sequence(section['waypoints'], path + ('waypoints',))))
        if len(waypoints) < 2:
            raise reader.error("at least two waypoints are required", path + ('waypoints',))

    if 'speed' in section and 'speed_profile' in section:
        raise reader.error("give either 'speed' or 'speed_profile', not both", path)
    if 'speed_profile' in section:
        profile_path = path + ('speed_profile',)
        profile = tuple(reader.pair(knot, profile_path + (i,))
                        for i, knot in enumerate(reader.sequence(section['speed_profile'], profile_path)))
        if not profile:
            raise reader.error("speed_profile needs at least one [time, speed] knot", profile_path)
        times = [knot[0] for knot in profile]
        if any(later <= earlier for earlier, later in zip(times, times[1:])):
            raise reader.error("speed_profile times must be strictly increasing", profile_path)
    else:
        profile = ((0.0, reader.number(section, 'speed', path, 5.0)),)
    if any(knot[1] < 0 for knot in profile):
        raise reader.error("speeds must be >= 0", path)
    return ReferenceConfig(start=start, heading=heading, segments=segments, waypoints=waypoints,
                           resolution=resolution, speed_profile=profile)


def _parse_road(reader, raw):
    path = ('road',)
    section = reader.mapping(raw, path, ('lane_half_width', 'shrink_zones'), ('lane_half_width',))
    lane = reader.number(section, 'lane_half_width', path)
    if lane <= 0:
        raise reader.error("lane_half_width must be > 0", path + ('lane_half_width',))
    zones = []
    zones_path = path + ('shrink_zones',)
    for index, item in enumerate(reader.sequence(section.get('shrink_zones'), zones_path)):
        item_path = zones_path + (index,)
        entry = reader.mapping(item, item_path, ('start', 'end', 'half_width', 'taper'),
                               ('start', 'end', 'half_width'))
        zone = RoadShrinkZone(reader.number(entry, 'start', item_path), reader.number(entry, 'end', item_path),
                              reader.number(entry, 'half_width', item_path),
                              reader.number(entry, 'taper', item_path, 5.0))
        if zone.end_s < zone.start_s or zone.half_width <= 0 or zone.taper_m < 0:
            raise reader.error("shrink zone needs start <= end, half_width > 0 and taper >= 0", item_path)
        zones.append(zone)
    return RoadConfig(lane_half_width=lane, shrink_zones=tuple(zones))


def _parse_agents(reader, raw):
    path = ('agents',)
    agents, seen = [], set()
    classes = {object_class.value: object_class for object_class in ObjectClass}
    for index, item in enumerate(reader.sequence(raw, path)):
        item_path = path + (index,)
        entry = reader.mapping(item, item_path, ('id', 'class', 'length', 'width', 'position', 'station',
                                                 'velocity'), ('id',))
        agent_id = str(entry['id'])
        if agent_id in seen:
            raise reader.error(f"duplicate agent id '{agent_id}'", item_path + ('id',))
        seen.add(agent_id)
        class_name = entry.get('class', 'generic')
        if class_name not in classes:
            raise reader.error(f"unknown agent class {class_name!r}", item_path + ('class',))
        if ('position' in entry) == ('station' in entry):
            raise reader.error("exactly one of 'position' or 'station' is required", item_path)
        position = reader.pair(entry['position'], item_path + ('position',)) if 'position' in entry else None
        station = reader.pair(entry['station'], item_path + ('station',)) if 'station' in entry else None
        length = reader.number(entry, 'length', item_path, 0.6)
        width = reader.number(entry, 'width', item_path, 0.6)
        if length <= 0 or width <= 0:
            raise reader.error("agent length and width must be > 0", item_path)
        velocity = reader.pair(entry.get('velocity', [0.0, 0.0]), item_path + ('velocity',))
        agents.append(AgentSpec(id=agent_id, object_class=classes[class_name], length=length, width=width,
                                position=position, station=station, velocity=velocity))
    return tuple(agents)


def _parse_sim(reader, raw):
    path = ('sim',)
    section = reader.mapping(raw, path, ('duration', 'initial_lateral_offset', 'initial_heading_offset', 'plant'),
                             ('duration',))
    duration = reader.number(section, 'duration', path)
    if duration <= 0:
        raise reader.error("duration must be > 0", path + ('duration',))
    plant_path = path + ('plant',)
    plant_section = reader.mapping(section.get('plant'), plant_path, ('actuation_lag', 'tau_scale',
                                                                      'wheelbase_scale'))
    plant = PlantOptions(actuation_lag=reader.boolean(plant_section, 'actuation_lag', plant_path, True),
                         tau_scale=reader.number(plant_section, 'tau_scale', plant_path, 1.0),
                         wheelbase_scale=reader.number(plant_section, 'wheelbase_scale', plant_path, 1.0))
    if plant.tau_scale <= 0 or plant.wheelbase_scale <= 0:
        raise reader.error("plant scale factors must be > 0", plant_path)
    return SimOptions(duration=duration,
                      initial_lateral_offset=reader.number(section, 'initial_lateral_offset', path, 0.0),
                      initial_heading_offset=reader.number(section, 'initial_heading_offset', path, 0.0),
                      plant=plant)


def _parse_solver(reader, raw):
    path = ('solver',)
    section = reader.mapping(raw, path, SOLVER_FIELDS)
    values = {}
    for key, value in section.items():
        if key == 'warm_start':
            values[key] = reader.boolean(section, key, path, True)
        elif key in ('max_sqp_iterations', 'max_qp_iterations'):
            values[key] = reader.integer(section, key, path)
        else:
            values[key] = reader.number(section, key, path)
    return _build(reader, path, create_solver_config, **values)


def scenario_from_document(document: Any, source: str = '<scenario>', lines: Optional[dict] = None,
                           default_name: str = 'scenario') -> Scenario:
    """Validate a loaded YAML document and build the Scenario."""
    reader = _DocumentReader(source, lines or {})
    document = reader.mapping(document, (), SECTIONS, REQUIRED_SECTIONS)

    model_section = reader.mapping(document['model'], ('model',), ('wheelbase', 'tau'), ('wheelbase', 'tau'))
    model = _build(reader, ('model',), ModelParams, reader.number(model_section, 'wheelbase', ('model',)),
                   reader.number(model_section, 'tau', ('model',)))

    footprint_section = reader.mapping(document.get('footprint'), ('footprint',), ('length', 'width'))
    footprint = _build(reader, ('footprint',), Footprint,
                       reader.number(footprint_section, 'length', ('footprint',), 4.4),
                       reader.number(footprint_section, 'width', ('footprint',), 1.8))

    limits_section = reader.mapping(document.get('limits'), ('limits',), LIMIT_FIELDS)
    limit_defaults = Limits()
    limits = _build(reader, ('limits',), Limits,
                    **{key: reader.number(limits_section, key, ('limits',), getattr(limit_defaults, key))
                       for key in LIMIT_FIELDS})

    weights_section = reader.mapping(document.get('weights'), ('weights',), WEIGHT_FIELDS)
    weight_defaults = CostWeights()
    weights = _build(reader, ('weights',), CostWeights,
                     **{attribute: reader.number(weights_section, key, ('weights',),
                                                 getattr(weight_defaults, attribute))
                        for key, attribute in WEIGHT_FIELDS.items()})

    s_target, safety = _parse_safety(reader, document.get('safety'))
    if limits.s_min >= s_target:
        raise reader.error("s_min must be < s_target", ('limits', 's_min'))

    horizon_section = reader.mapping(document['horizon'], ('horizon',), ('n', 'ts'), ('n', 'ts'))
    horizon = _build(reader, ('horizon',), HorizonConfig, reader.integer(horizon_section, 'n', ('horizon',)),
                     reader.number(horizon_section, 'ts', ('horizon',)))

    name = document.get('name', default_name)
    if not isinstance(name, str) or not name:
        raise reader.error("name must be a non-empty string", ('name',))

    scenario = Scenario(name=name, model=model, footprint=footprint, limits=limits, weights=weights,
                        s_target=s_target, safety=safety, horizon=horizon, road=_parse_road(reader, document['road']),
                        reference=_parse_reference(reader, document['reference']),
                        agents=_parse_agents(reader, document.get('agents')),
                        sim=_parse_sim(reader, document['sim']), solver=_parse_solver(reader, document.get('solver')))
    _check_path_length(reader, scenario)
    return scenario


def _check_path_length(reader, scenario):
    try:
        path = planner_path(scenario)
    except InvalidProblemError as exc:
        raise reader.error(str(exc), ('reference',)) from exc
    required = required_path_length(scenario)
    if required > path.length + 1e-6:
        raise reader.error(f"reference path is {path.length:.2f} m long but the run needs {required:.2f} m "
                           f"(duration plus one horizon at the scripted speed)", ('reference',))


def _parse_value(raw: str):
    try:
        return yaml.safe_load(raw)
    except yaml.YAMLError:
        return raw


def _resolve_bare_key(document, key):
    owners = [section for section, value in document.items() if isinstance(value, dict) and key in value]
    if key in document or len(owners) != 1:
        return [key]
    return [owners[0], key]


def apply_overrides(document: dict, overrides: Iterable[str], source: str = '<overrides>') -> dict:
    """Apply `dotted.path=value` assignments to a raw document in place.

    Values use YAML scalar rules; integer path parts index lists. A bare key
    that exists in exactly one section resolves to that section.
    """
    for item in overrides:
        if '=' not in item:
            raise ScenarioError(f"override '{item}' is not of the form key=value", source=source)
        key, raw_value = item.split('=', 1)
        key = key.strip()
        if not key:
            raise ScenarioError(f"override '{item}' has an empty key", source=source)
        parts = key.split('.')
        if len(parts) == 1:
            parts = _resolve_bare_key(document, parts[0])
        container = document
        for depth, part in enumerate(parts):
            last = depth == len(parts) - 1
            if isinstance(container, list):
                try:
                    index = int(part)
                    container[index]
                except (ValueError, IndexError):
                    raise ScenarioError(f"'{part}' is not a valid list index", source=source, field=key) from None
                if last:
                    container[index] = _parse_value(raw_value)
                else:
                    container = container[index]
            elif isinstance(container, dict):
                if last:
                    container[part] = _parse_value(raw_value)
                else:
                    container = container.setdefault(part, {})
            else:
                raise ScenarioError(f"cannot descend into a scalar at '{part}'", source=source, field=key)
        logger.debug("override %s = %s", key, raw_value)
    return document


def parse_scenario(text: str, source: str = '<scenario>', overrides: Iterable[str] = (),
                   default_name: str = 'scenario') -> Scenario:
    try:
        document = yaml.safe_load(text)
        lines = _line_index(yaml.compose(text))
    except yaml.YAMLError as exc:
        mark = getattr(exc, 'problem_mark', None)
        raise ScenarioError(f"invalid YAML: {getattr(exc, 'problem', None) or exc}", source=source,
                            line=mark.line + 1 if mark else None) from exc
    if document is None:
        raise ScenarioError("empty scenario document", source=source)
    overrides = list(overrides)
    if overrides:
        if not isinstance(document, dict):
            raise ScenarioError("expected a mapping at the top level", source=source)
        apply_overrides(document, overrides, source=source)
    return scenario_from_document(document, source, lines, default_name)


def load_scenario(path, overrides: Iterable[str] = ()) -> Scenario:
    """Read, override and validate a scenario file; the file stem is the default name."""
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as exc:
        raise OutputError(f"Cannot read scenario file {path}: {exc}") from exc
    scenario = parse_scenario(text, source=str(path), overrides=overrides, default_name=path.stem)
    logger.info("Loaded scenario %s from %s (%d agents)", scenario.name, path, len(scenario.agents))
    return scenario


def dump_scenario(scenario: Scenario) -> dict:
    """Serialize a Scenario to a document that parses back to an equal Scenario."""
    reference = scenario.reference
    reference_doc = {'start': list(reference.start), 'heading': reference.heading,
                     'resolution': reference.resolution,
                     'speed_profile': [list(knot) for knot in reference.speed_profile]}
    if reference.segments:
        reference_doc['segments'] = [
            {'type': 'straight', 'length': segment.length} if segment.kind == 'straight'
            else {'type': 'arc', 'radius': segment.radius, 'angle': segment.angle}
            for segment in reference.segments]
    else:
        reference_doc['waypoints'] = [list(point) for point in reference.waypoints]

    agents = []
    for agent in scenario.agents:
        entry = {'id': agent.id, 'class': agent.object_class.value, 'length': agent.length, 'width': agent.width,
                 'velocity': list(agent.velocity)}
        if agent.position is not None:
            entry['position'] = list(agent.position)
        else:
            entry['station'] = list(agent.station)
        agents.append(entry)

    safety = {'s_target': scenario.s_target}
    for object_class, params in scenario.safety.items():
        safety[object_class.value] = {'a': params.lateral.a, 'b': params.lateral.b, 'c': params.longitudinal.c}
    sim = scenario.sim
    return {
        'name': scenario.name,
        'model': {'wheelbase': scenario.model.wheelbase_b, 'tau': scenario.model.tau},
        'footprint': {'length': scenario.footprint.length, 'width': scenario.footprint.width},
        'limits': {key: getattr(scenario.limits, key) for key in LIMIT_FIELDS},
        'weights': {key: getattr(scenario.weights, attribute) for key, attribute in WEIGHT_FIELDS.items()},
        'safety': safety,
        'horizon': {'n': scenario.horizon.n_steps, 'ts': scenario.horizon.ts},
        'road': {'lane_half_width': scenario.road.lane_half_width,
                 'shrink_zones': [{'start': zone.start_s, 'end': zone.end_s, 'half_width': zone.half_width,
                                   'taper': zone.taper_m} for zone in scenario.road.shrink_zones]},
        'reference': reference_doc,
        'agents': agents,
        'sim': {'duration': sim.duration, 'initial_lateral_offset': sim.initial_lateral_offset,
                'initial_heading_offset': sim.initial_heading_offset,
                'plant': {'actuation_lag': sim.plant.actuation_lag, 'tau_scale': sim.plant.tau_scale,
                          'wheelbase_scale': sim.plant.wheelbase_scale}},
        'solver': {key: getattr(scenario.solver, key) for key in SOLVER_FIELDS},
    }


def write_scenario(scenario: Scenario, path) -> Path:
    path = Path(path)
    try:
        path.write_text(yaml.safe_dump(dump_scenario(scenario), sort_keys=False), encoding='utf-8')
    except OSError as exc:
        raise OutputError(f"Cannot write scenario file {path}: {exc}") from exc
    return path

