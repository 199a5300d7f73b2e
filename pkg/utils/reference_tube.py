"""
Reference geometry and the collision-free tube.

Covers the signed lateral error, the sampled planner path, discretization of
that path into a per-step reference with the predicted speeds, and the
per-step lateral-error bounds built from lane width, obstacle cuts and shrink
zones.
"""
import logging
import math
from typing import Iterable, Optional, Sequence

import numpy as np

from models import (HorizonConfig, ObstacleCut, PathSegment, ReferencePoint, ReferenceTrajectory,
                    RoadShrinkZone, ShrinkZone, Side, TubeBounds)
from utils.errors import InvalidProblemError, PathTooShortError

logger = logging.getLogger(__name__)

LENGTH_TOLERANCE = 1e-9


def lateral_error(position, ref: ReferencePoint) -> float:
    """Signed lateral error, positive when the position lies left of the reference heading."""
    x, y = position
    return -(x - ref.x_bar) * math.sin(ref.theta_bar) + (y - ref.y_bar) * math.cos(ref.theta_bar)


def relative_coordinates(xs, ys, x_bar, y_bar, theta_bar):
    """Longitudinal and lateral offsets of points in the frames of the given reference points."""
    dx = np.asarray(xs, dtype=float) - x_bar
    dy = np.asarray(ys, dtype=float) - y_bar
    cos_t, sin_t = np.cos(theta_bar), np.sin(theta_bar)
    return dx * cos_t + dy * sin_t, -dx * sin_t + dy * cos_t


def lateral_errors(xs, ys, reference: ReferenceTrajectory) -> np.ndarray:
    return relative_coordinates(xs, ys, reference.x_bar, reference.y_bar, reference.theta_bar)[1]


class PlannerPath:
    """Sampled planner path parametrized by arc length.

    Positions and (unwrapped) headings are linearly interpolated; curvature is
    either supplied by the constructor of the path or obtained by finite
    differences of heading over arc length.
    """

    def __init__(self, xs, ys, headings=None, curvatures=None):
        self.xs = np.asarray(xs, dtype=float)
        self.ys = np.asarray(ys, dtype=float)
        if self.xs.ndim != 1 or self.xs.shape != self.ys.shape or len(self.xs) < 2:
            raise InvalidProblemError("a planner path needs at least two (x, y) samples")
        steps = np.hypot(np.diff(self.xs), np.diff(self.ys))
        if np.any(steps <= LENGTH_TOLERANCE):
            raise InvalidProblemError("planner path samples must be distinct")
        self.arc_length = np.concatenate([[0.0], np.cumsum(steps)])

        if headings is None:
            dx = np.gradient(self.xs, self.arc_length, edge_order=2)
            dy = np.gradient(self.ys, self.arc_length, edge_order=2)
            headings = np.arctan2(dy, dx)
        self.headings = np.unwrap(np.asarray(headings, dtype=float))
        if curvatures is None:
            curvatures = np.gradient(self.headings, self.arc_length, edge_order=2)
        self.curvatures = np.asarray(curvatures, dtype=float)

    @property
    def length(self) -> float:
        return float(self.arc_length[-1])

    def sample(self, s):
        """(x, y, heading, curvature) at arc length(s) s, clamped to the path ends."""
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.length)
        return (np.interp(s, self.arc_length, self.xs), np.interp(s, self.arc_length, self.ys),
                np.interp(s, self.arc_length, self.headings), np.interp(s, self.arc_length, self.curvatures))

    def project(self, x: float, y: float, hint: Optional[float] = None, window: float = 30.0) -> float:
        """Arc length of the closest path point; with a hint only segments near it are searched."""
        start_x, start_y = self.xs[:-1], self.ys[:-1]
        seg_x, seg_y = np.diff(self.xs), np.diff(self.ys)
        seg_len2 = seg_x ** 2 + seg_y ** 2
        fraction = np.clip(((x - start_x) * seg_x + (y - start_y) * seg_y) / seg_len2, 0.0, 1.0)
        distance2 = (start_x + fraction * seg_x - x) ** 2 + (start_y + fraction * seg_y - y) ** 2
        if hint is not None:
            seg_s = self.arc_length[:-1]
            far = (self.arc_length[1:] < hint - window) | (seg_s > hint + window)
            if not np.all(far):
                distance2 = np.where(far, np.inf, distance2)
        best = int(np.argmin(distance2))
        return float(self.arc_length[best] + fraction[best] * math.sqrt(seg_len2[best]))

    @classmethod
    def from_segments(cls, start, heading: float, segments: Sequence[PathSegment],
                      resolution: float = 0.25) -> 'PlannerPath':
        """Chain straight segments and circular arcs; heading and curvature are exact."""
        if not segments:
            raise InvalidProblemError("a segment path needs at least one segment")
        xs, ys, headings, curvatures = [float(start[0])], [float(start[1])], [float(heading)], [None]
        x, y, theta = xs[0], ys[0], headings[0]
        for segment in segments:
            if segment.kind == 'straight':
                length, kappa = segment.length, 0.0
            elif segment.kind == 'arc':
                if segment.radius <= 0:
                    raise InvalidProblemError("arc radius must be > 0")
                length, kappa = abs(segment.radius * segment.angle), math.copysign(1.0 / segment.radius,
                                                                                  segment.angle)
            else:
                raise InvalidProblemError(f"unknown path segment kind '{segment.kind}'")
            if length <= 0:
                raise InvalidProblemError("path segments must have positive length")
            count = max(1, int(math.ceil(length / resolution)))
            ds = np.full(count, length / count)
            s_local = np.cumsum(ds)
            if kappa == 0.0:
                seg_theta = np.full(count, theta)
                seg_x = x + s_local * math.cos(theta)
                seg_y = y + s_local * math.sin(theta)
            else:
                seg_theta = theta + kappa * s_local
                seg_x = x + (np.sin(seg_theta) - math.sin(theta)) / kappa
                seg_y = y - (np.cos(seg_theta) - math.cos(theta)) / kappa
            if curvatures[0] is None:
                curvatures[0] = kappa
            curvatures.extend([kappa] * count)
            xs.extend(seg_x)
            ys.extend(seg_y)
            headings.extend(seg_theta)
            x, y, theta = float(seg_x[-1]), float(seg_y[-1]), float(seg_theta[-1])
        return cls(xs, ys, headings, curvatures)

    @classmethod
    def from_waypoints(cls, waypoints: Iterable, resolution: float = 0.25) -> 'PlannerPath':
        """Polyline through the waypoints, resampled at a uniform arc-length resolution."""
        points = np.asarray(list(waypoints), dtype=float)
        if points.ndim != 2 or points.shape[1] != 2 or len(points) < 2:
            raise InvalidProblemError("waypoint paths need at least two (x, y) pairs")
        coarse = PlannerPath(points[:, 0], points[:, 1])
        count = max(2, int(math.ceil(coarse.length / resolution)) + 1)
        s = np.linspace(0.0, coarse.length, count)
        return cls(np.interp(s, coarse.arc_length, coarse.xs), np.interp(s, coarse.arc_length, coarse.ys))


def discretize_reference(path: PlannerPath, speeds, horizon: HorizonConfig,
                         start_s: float = 0.0) -> ReferenceTrajectory:
    """Reference point k sits at arc length start_s + sum_{j<k} v_j * ts."""
    speeds = np.asarray(speeds, dtype=float)
    if speeds.shape != (horizon.n_points,):
        raise InvalidProblemError(f"speed profile needs {horizon.n_points} values, got {speeds.shape}")
    if np.any(speeds < 0) or not np.all(np.isfinite(speeds)):
        raise InvalidProblemError("speeds must be finite and >= 0")
    offsets = np.concatenate([[0.0], np.cumsum(speeds[:-1] * horizon.ts)])
    arc = start_s + offsets
    if arc[-1] > path.length + LENGTH_TOLERANCE:
        raise PathTooShortError(float(arc[-1]), path.length)
    xs, ys, headings, curvatures = path.sample(arc)
    reference = ReferenceTrajectory(xs, ys, headings, curvatures, speeds, arc_length=arc)
    if not reference.spacing_consistent(horizon.ts):
        logger.warning("Reference points starting at s = %.2f m deviate more than 10%% from v * ts spacing; "
                       "the planner path bends sharply within one step", start_s)
    return reference


def build_tube(lane_half_widths, obstacle_cuts: Sequence[ObstacleCut] = (),
               shrink_zones: Sequence[ShrinkZone] = (), vehicle_half_width: float = 0.0,
               n_points: Optional[int] = None) -> TubeBounds:
    """Per-step lateral-error bounds as the most restrictive of all contributions.

    Crossed bounds are returned as they are; the slack in the tube constraint absorbs them.
    """
    lane = np.asarray(lane_half_widths, dtype=float)
    if lane.ndim == 0:
        if n_points is None:
            raise InvalidProblemError("n_points is required with a scalar lane half-width")
        lane = np.full(n_points, float(lane))
    n = len(lane)
    steps = np.arange(n)
    lane_bound = lane - vehicle_half_width
    upper = lane_bound.copy()
    lower = -lane_bound

    for zone in shrink_zones:
        if zone.taper_steps < 1:
            raise InvalidProblemError("shrink zone taper must be >= 1 step")
        weight = np.zeros(n)
        weight[(steps >= zone.first_step) & (steps <= zone.last_step)] = 1.0
        entry = (steps >= zone.first_step - zone.taper_steps) & (steps < zone.first_step)
        weight[entry] = (steps[entry] - (zone.first_step - zone.taper_steps)) / zone.taper_steps
        leave = (steps > zone.last_step) & (steps <= zone.last_step + zone.taper_steps)
        weight[leave] = np.maximum(weight[leave], 1.0 - (steps[leave] - zone.last_step) / zone.taper_steps)
        zone_half_width = lane + weight * (zone.half_width - lane)
        zone_bound = np.minimum(zone_half_width, lane) - vehicle_half_width
        upper = np.minimum(upper, zone_bound)
        lower = np.maximum(lower, -zone_bound)

    for cut in obstacle_cuts:
        if cut.intrusion < 0:
            raise InvalidProblemError("obstacle intrusion must be >= 0")
        first, last = max(cut.first_step, 0), min(cut.last_step, n - 1)
        if first > last:
            continue
        span = slice(first, last + 1)
        if cut.side is Side.LEFT:
            upper[span] = np.minimum(upper[span], lane_bound[span] - cut.intrusion)
        else:
            lower[span] = np.maximum(lower[span], -lane_bound[span] + cut.intrusion)

    tube = TubeBounds(lower, upper)
    if tube.crossed.any():
        logger.debug("Tube bounds crossed at steps %s", np.flatnonzero(tube.crossed).tolist())
    return tube


def zones_to_steps(zones: Sequence[RoadShrinkZone], arc_lengths) -> list:
    """Convert arc-length shrink zones to step ranges of a discretized reference.

    Positions beyond the last reference point are extrapolated with the mean
    step spacing so a zone just ahead of the horizon still starts its taper.
    """
    arc = np.asarray(arc_lengths, dtype=float)
    n_steps = len(arc) - 1
    travelled = arc[-1] - arc[0]
    result = []
    for zone in zones:
        if travelled <= LENGTH_TOLERANCE:
            if zone.start_s <= arc[0] <= zone.end_s:
                result.append(ShrinkZone(0, n_steps, zone.half_width, 1))
            continue
        spacing = travelled / n_steps

        def index_of(s):
            if s > arc[-1]:
                return n_steps + (s - arc[-1]) / spacing
            if s < arc[0]:
                return (s - arc[0]) / spacing
            return float(np.interp(s, arc, np.arange(n_steps + 1)))

        first = int(math.ceil(index_of(zone.start_s) - 1e-9))
        last = max(first, int(math.floor(index_of(zone.end_s) + 1e-9)))
        taper = max(1, int(math.ceil(zone.taper_m / spacing)))
        if last + taper < 0 or first - taper > n_steps:
            continue
        result.append(ShrinkZone(first, last, zone.half_width, taper))
    return result
