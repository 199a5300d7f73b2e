"""
Clearance-dependent safety functions and most-constraining-object selection.
"""
import logging
from typing import Dict, Mapping, Optional, Sequence

import numpy as np
from scipy.special import expit

from models import (ClassSafetyParams, ClearanceInputs, LongitudinalSafetyParams, ObjectClass,
                    ObjectTrack, SafetyFunctionParams, Side, SideClearance)
from utils.errors import InvalidProblemError

logger = logging.getLogger(__name__)


def sigmoid_safety(d, a, b, s_target):
    """Sigmoid safety value and its slope with elementwise (a, b); returns (f, df/dd)."""
    sigma = expit(np.asarray(a) * (np.asarray(d, dtype=float) - b))
    return s_target * sigma, s_target * np.asarray(a) * sigma * (1.0 - sigma)


def _scalar_or_array(value):
    return float(value) if np.ndim(value) == 0 else value


def f_s(d, params: SafetyFunctionParams):
    """s_target / (1 + exp(-a (d - b))), increasing in d with range (0, s_target)."""
    return _scalar_or_array(sigmoid_safety(d, params.a, params.b, params.s_target)[0])


def f_s_derivative(d, params: SafetyFunctionParams):
    return _scalar_or_array(sigmoid_safety(d, params.a, params.b, params.s_target)[1])


def f_lon(d_lon, params: LongitudinalSafetyParams):
    """Safety offset from longitudinal distance: s_target (1 - exp(-c |d_lon|)), zero at 0 and even."""
    value = -params.s_target * np.expm1(-params.c * np.abs(np.asarray(d_lon, dtype=float)))
    return _scalar_or_array(value)


def resolve_class_params(class_params: Mapping[ObjectClass, ClassSafetyParams],
                         object_class: ObjectClass) -> ClassSafetyParams:
    """Parameters of a class, falling back to the generic class."""
    if object_class in class_params:
        return class_params[object_class]
    if ObjectClass.GENERIC in class_params:
        return class_params[ObjectClass.GENERIC]
    return ClassSafetyParams()


def object_safety_values(track: ObjectTrack, params: ClassSafetyParams):
    """Per-step (f_s(d_ref) + s_lon, s_lon) of one object at zero lateral error."""
    s_lon = f_lon(track.d_lon, params.longitudinal)
    return f_s(track.d_ref, params.lateral) + np.asarray(s_lon), np.asarray(s_lon, dtype=float)


def select_most_constraining(objects: Sequence[ObjectTrack],
                             class_params: Mapping[ObjectClass, ClassSafetyParams],
                             n_points: int, s_target: Optional[float] = None) -> ClearanceInputs:
    """Pick, per step and side, the object with the smallest f_s(d_ref) + s_lon.

    Objects whose value exceeds s_target are ignored; ties go to the lowest
    object index. Sides left without an object carry the inactive sentinel.
    """
    if not objects:
        return ClearanceInputs.empty(n_points)

    count = len(objects)
    values = np.full((count, n_points), np.inf)
    s_lon = np.zeros((count, n_points))
    d_ref = np.zeros((count, n_points))
    a = np.ones((count, n_points))
    b = np.zeros((count, n_points))
    left = np.zeros((count, n_points), dtype=bool)
    targets = np.zeros(count)

    for i, track in enumerate(objects):
        if len(track.d_ref) != n_points:
            raise InvalidProblemError(f"object {track.id} has {len(track.d_ref)} steps, expected {n_points}")
        params = resolve_class_params(class_params, track.object_class)
        values[i], s_lon[i] = object_safety_values(track, params)
        d_ref[i] = track.d_ref
        a[i] = params.lateral.a
        b[i] = params.lateral.b
        left[i] = track.left_mask
        targets[i] = params.lateral.s_target if s_target is None else s_target

    values = np.where(values > targets[:, None], np.inf, values)
    columns = np.arange(n_points)
    sides = {}
    for side, mask in ((Side.LEFT, left), (Side.RIGHT, ~left)):
        side_values = np.where(mask, values, np.inf)
        chosen = np.argmin(side_values, axis=0)
        active = np.isfinite(side_values[chosen, columns])
        sides[side] = SideClearance(
            active=active,
            d_ref=np.where(active, d_ref[chosen, columns], np.inf),
            s_lon=np.where(active, s_lon[chosen, columns], 0.0),
            a=np.where(active, a[chosen, columns], 1.0),
            b=np.where(active, b[chosen, columns], 0.0),
            object_index=np.where(active, chosen, -1),
        )
    logger.debug("Most constraining objects: %d left steps, %d right steps active",
                 int(sides[Side.LEFT].active.sum()), int(sides[Side.RIGHT].active.sum()))
    return ClearanceInputs(sides[Side.LEFT], sides[Side.RIGHT])


def class_params_table(params: Mapping[ObjectClass, ClassSafetyParams]) -> Dict[str, dict]:
    """Plain mapping of per-class parameters for debug logging."""
    return {
        object_class.value: {'a': p.lateral.a, 'b': p.lateral.b, 'c': p.longitudinal.c,
                             's_target': p.lateral.s_target}
        for object_class, p in params.items()
    }
