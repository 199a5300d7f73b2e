"""
Multiple-shooting transcription of the clearance-maximizing steering problem.

Decision variables are stage-interleaved: for k < N the block is
(x_k[5], eps_k, s_k, u_k) and the terminal block is (x_N[5], eps_N, s_N).
The safety variables s_k exist only when alpha > 0; without biasing the
problem carries neither s nor its constraints.

Inequalities are written g(z) <= 0 and ordered in named blocks:
input upper/lower, curvature upper/lower (k = 1..N), tube lower/upper,
slack non-negativity, and, with biasing, the safety floor (s_min where the
clearance bound leaves room for it) plus the left and right clearance
constraints on steps with an active object.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict

import numpy as np
import scipy.sparse as sp

from models import DecisionVariables, MpcProblem, STATE_DIM
from utils.clearance_safety import sigmoid_safety
from utils.errors import InvalidProblemError
from utils.reference_tube import relative_coordinates
from utils.vehicle_dynamics import KAPPA, KAPPA_DES, THETA, batch_rk4, batch_rk4_with_jacobians, rollout

logger = logging.getLogger(__name__)

BOUND_TOLERANCE = 1e-9
SAFETY_FLOOR_MARGIN = 0.01


class SparsePattern:
    """Fixed COO structure that refills a CSC matrix from per-entry values in COO order."""

    def __init__(self, rows, cols, shape):
        rows = np.asarray(rows, dtype=int)
        cols = np.asarray(cols, dtype=int)
        marker = sp.coo_matrix((np.arange(1, len(rows) + 1, dtype=float), (rows, cols)), shape=shape).tocsc()
        if marker.nnz != len(rows):
            raise ValueError("sparsity pattern has duplicate entries")
        self._order = marker.data.astype(int) - 1
        self._indices = marker.indices.copy()
        self._indptr = marker.indptr.copy()
        self.shape = shape
        self.nnz = len(rows)

    def matrix(self, values) -> sp.csc_matrix:
        data = np.asarray(values, dtype=float)[self._order]
        return sp.csc_matrix((data, self._indices.copy(), self._indptr.copy()), shape=self.shape)


@dataclass
class ConstraintResiduals:
    """Constraint values at one point; inequality blocks follow the g(z) <= 0 convention."""
    initial_defect: np.ndarray
    dynamics_defects: np.ndarray
    inequalities: Dict[str, np.ndarray]
    safety_steps: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def max_defect(self) -> float:
        return float(max(np.abs(self.initial_defect).max(initial=0.0),
                         np.abs(self.dynamics_defects).max(initial=0.0)))

    @property
    def max_inequality_violation(self) -> float:
        return float(max((np.maximum(values, 0.0).max(initial=0.0) for values in self.inequalities.values()),
                         default=0.0))

    @property
    def max_violation(self) -> float:
        return max(self.max_defect, self.max_inequality_violation)


@dataclass
class Linearization:
    cost: float
    gradient: np.ndarray
    hessian: sp.csc_matrix
    eq_values: np.ndarray
    eq_jacobian: sp.csc_matrix
    ineq_values: np.ndarray
    ineq_jacobian: sp.csc_matrix
    blocks: Dict[str, slice]


class MpcTranscription:
    """Index layout, cost, constraints and derivatives of one MpcProblem."""

    def __init__(self, problem: MpcProblem):
        self.problem = problem
        self.n_steps = n = problem.n_steps
        self.biased = problem.biased
        nb = 1 if self.biased else 0
        width = STATE_DIM + 2 + nb
        self.n_variables = n * width + STATE_DIM + 1 + nb

        offsets = np.arange(n + 1) * width
        self.idx_x = offsets[:, None] + np.arange(STATE_DIM)[None, :]
        self.idx_eps = offsets + STATE_DIM
        self.idx_s = offsets + STATE_DIM + 1 if self.biased else np.zeros(0, dtype=int)
        self.idx_u = offsets[:-1] + STATE_DIM + 1 + nb

        reference = problem.reference
        self.speeds = reference.speeds
        theta0 = problem.initial_state.theta
        wraps = np.round((reference.theta_bar[0] - theta0) / (2.0 * np.pi))
        self.theta_ref = reference.theta_bar - 2.0 * np.pi * wraps
        self.normal_x = -np.sin(reference.theta_bar)
        self.normal_y = np.cos(reference.theta_bar)
        self.x_init = problem.initial_state.as_array()

        weights = problem.weights
        self.w_lat = np.append(np.full(n, weights.q1), weights.p1)
        self.w_heading = np.append(np.full(n, weights.q2), weights.p2)
        self.w_curvature = np.append(np.full(n, weights.q3), weights.p3)

        self.left_steps = np.flatnonzero(problem.clearance.left.active) if self.biased else np.zeros(0, int)
        self.right_steps = np.flatnonzero(problem.clearance.right.active) if self.biased else np.zeros(0, int)

        self._build_hessian()
        self._build_equality_pattern()
        self._build_inequality_pattern()

    # -- packing -----------------------------------------------------------

    def pack(self, variables: DecisionVariables) -> np.ndarray:
        if variables.n_steps != self.n_steps:
            raise InvalidProblemError(f"variables have {variables.n_steps} steps, problem has {self.n_steps}")
        z = np.zeros(self.n_variables)
        z[self.idx_x] = variables.states
        z[self.idx_u] = variables.inputs
        z[self.idx_eps] = variables.slacks
        if self.biased:
            z[self.idx_s] = variables.safety
        return z

    def unpack(self, z) -> DecisionVariables:
        safety = z[self.idx_s] if self.biased else np.full(self.n_steps + 1, self.problem.limits.s_min)
        return DecisionVariables(z[self.idx_x].copy(), z[self.idx_u].copy(), z[self.idx_eps].copy(),
                                 np.array(safety, dtype=float))

    # -- geometry ----------------------------------------------------------

    def lateral_errors(self, states) -> np.ndarray:
        reference = self.problem.reference
        return relative_coordinates(states[:, 0], states[:, 1], reference.x_bar, reference.y_bar,
                                    reference.theta_bar)[1]

    def safety_bounds(self, lateral) -> tuple:
        """Right-hand sides f_s(d) + s_lon and slopes df_s/dd for the active left and right steps."""
        clearance = self.problem.clearance
        s_target = self.problem.s_target
        left, right = clearance.left, clearance.right
        k_l, k_r = self.left_steps, self.right_steps
        f_l, fp_l = sigmoid_safety(left.d_ref[k_l] - lateral[k_l], left.a[k_l], left.b[k_l], s_target)
        f_r, fp_r = sigmoid_safety(right.d_ref[k_r] + lateral[k_r], right.a[k_r], right.b[k_r], s_target)
        return f_l + left.s_lon[k_l], fp_l, f_r + right.s_lon[k_r], fp_r

    def tightest_safety_bound(self, lateral) -> tuple:
        """Smaller of the left and right bounds per step (inf without an active object) and its x, y slopes."""
        n_points = self.n_steps + 1
        bound = np.full(n_points, np.inf)
        slope_x = np.zeros(n_points)
        slope_y = np.zeros(n_points)
        bound_l, fp_l, bound_r, fp_r = self.safety_bounds(lateral)
        # d_l = d_ref - e_lat, d_r = d_ref + e_lat
        for steps, values, d_de in ((self.left_steps, bound_l, -fp_l), (self.right_steps, bound_r, fp_r)):
            tighter = values < bound[steps]
            chosen = steps[tighter]
            bound[chosen] = values[tighter]
            slope_x[chosen] = d_de[tighter] * self.normal_x[chosen]
            slope_y[chosen] = d_de[tighter] * self.normal_y[chosen]
        return bound, slope_x, slope_y

    def safety_floor(self, lateral) -> tuple:
        """
        Effective lower bound on s and its x, y slopes.

        s_min is held wherever the clearance bound leaves room for it. Where the
        bound drops below s_min + SAFETY_FLOOR_MARGIN the floor follows the bound
        at that margin, never below zero, so the interval [floor, bound] is never
        empty. With s_min = 0 the floor is identically zero.
        """
        s_min = self.problem.limits.s_min
        bound, slope_x, slope_y = self.tightest_safety_bound(lateral)
        lowered = bound - SAFETY_FLOOR_MARGIN
        tracking = (lowered < s_min) & (lowered > 0.0)
        floor = np.minimum(s_min, np.maximum(lowered, 0.0))
        return floor, np.where(tracking, slope_x, 0.0), np.where(tracking, slope_y, 0.0)

    # -- cost --------------------------------------------------------------

    def cost(self, z) -> float:
        problem = self.problem
        weights = problem.weights
        states = z[self.idx_x]
        lateral = self.lateral_errors(states)
        heading = states[:, THETA] - self.theta_ref
        curvature = states[:, KAPPA] - problem.reference.kappa_bar
        slacks = z[self.idx_eps]
        total = (np.dot(self.w_lat, lateral ** 2) + np.dot(self.w_heading, heading ** 2)
                 + np.dot(self.w_curvature, curvature ** 2) + weights.r_input * np.dot(z[self.idx_u], z[self.idx_u])
                 + weights.slack_linear * slacks.sum() + weights.slack_quadratic * np.dot(slacks, slacks))
        if self.biased:
            total += weights.alpha * np.sum((z[self.idx_s] - problem.s_target) ** 2)
        return float(total)

    def gradient(self, z) -> np.ndarray:
        problem = self.problem
        weights = problem.weights
        states = z[self.idx_x]
        lateral = self.lateral_errors(states)
        grad = np.zeros(self.n_variables)
        grad[self.idx_x[:, 0]] = 2.0 * self.w_lat * lateral * self.normal_x
        grad[self.idx_x[:, 1]] = 2.0 * self.w_lat * lateral * self.normal_y
        grad[self.idx_x[:, THETA]] = 2.0 * self.w_heading * (states[:, THETA] - self.theta_ref)
        grad[self.idx_x[:, KAPPA]] = 2.0 * self.w_curvature * (states[:, KAPPA] - problem.reference.kappa_bar)
        grad[self.idx_u] = 2.0 * weights.r_input * z[self.idx_u]
        grad[self.idx_eps] = weights.slack_linear + 2.0 * weights.slack_quadratic * z[self.idx_eps]
        if self.biased:
            grad[self.idx_s] = 2.0 * weights.alpha * (z[self.idx_s] - problem.s_target)
        return grad

    def _build_hessian(self):
        # The cost is an exact quadratic (the lateral error is linear in x, y), so this is constant.
        weights = self.problem.weights
        ix, iy = self.idx_x[:, 0], self.idx_x[:, 1]
        rows = [ix, ix, iy, iy, self.idx_x[:, THETA], self.idx_x[:, KAPPA], self.idx_u, self.idx_eps]
        cols = [ix, iy, ix, iy, self.idx_x[:, THETA], self.idx_x[:, KAPPA], self.idx_u, self.idx_eps]
        nxx = self.normal_x * self.normal_x
        nxy = self.normal_x * self.normal_y
        nyy = self.normal_y * self.normal_y
        data = [2 * self.w_lat * nxx, 2 * self.w_lat * nxy, 2 * self.w_lat * nxy, 2 * self.w_lat * nyy,
                2 * self.w_heading, 2 * self.w_curvature,
                np.full(self.n_steps, 2 * weights.r_input), np.full(self.n_steps + 1, 2 * weights.slack_quadratic)]
        if self.biased:
            rows.append(self.idx_s)
            cols.append(self.idx_s)
            data.append(np.full(self.n_steps + 1, 2 * weights.alpha))
        self.hessian = sp.coo_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                                     shape=(self.n_variables, self.n_variables)).tocsc()
        self.hessian_scale = float(max(self.hessian.diagonal().max(initial=0.0), 1e-12))

    # -- equality constraints ----------------------------------------------

    def _build_equality_pattern(self):
        n = self.n_steps
        self.n_equalities = STATE_DIM * (n + 1)
        row_next = STATE_DIM + np.arange(n)[:, None] * STATE_DIM + np.arange(STATE_DIM)[None, :]
        rows = [np.arange(STATE_DIM), row_next.ravel()]
        cols = [self.idx_x[0], self.idx_x[1:].ravel()]
        # -d F / d x_k, row-major per stage
        rows.append(np.repeat(row_next, STATE_DIM, axis=1).ravel())
        cols.append(np.tile(self.idx_x[:-1], (1, STATE_DIM)).ravel())
        rows.append(row_next.ravel())
        cols.append(np.repeat(self.idx_u, STATE_DIM))
        self._eq_pattern = SparsePattern(np.concatenate(rows), np.concatenate(cols),
                                         (self.n_equalities, self.n_variables))
        self._eq_fixed = np.ones(STATE_DIM * (n + 1))

    def dynamics(self, z, with_jacobian: bool = False):
        states = z[self.idx_x]
        inputs = z[self.idx_u]
        problem = self.problem
        if with_jacobian:
            predicted, jac_x, jac_u = batch_rk4_with_jacobians(states[:-1], inputs, self.speeds[:-1],
                                                               problem.model, problem.horizon.ts)
        else:
            predicted = batch_rk4(states[:-1], inputs, self.speeds[:-1], problem.model, problem.horizon.ts)
        values = np.concatenate([states[0] - self.x_init, (states[1:] - predicted).ravel()])
        if not with_jacobian:
            return values
        data = np.concatenate([self._eq_fixed, -jac_x.reshape(-1), -jac_u.reshape(-1)])
        return values, self._eq_pattern.matrix(data)

    # -- inequality constraints --------------------------------------------

    def _build_inequality_pattern(self):
        kappa_cols = self.idx_x[1:, KAPPA]
        specs = [
            ('input_upper', [(self.idx_u, 1.0)]),
            ('input_lower', [(self.idx_u, -1.0)]),
            ('kappa_upper', [(kappa_cols, 1.0)]),
            ('kappa_lower', [(kappa_cols, -1.0)]),
            ('tube_lower', [(self.idx_x[:, 0], -self.normal_x), (self.idx_x[:, 1], -self.normal_y),
                            (self.idx_eps, -1.0)]),
            ('tube_upper', [(self.idx_x[:, 0], self.normal_x), (self.idx_x[:, 1], self.normal_y),
                            (self.idx_eps, -1.0)]),
            ('slack_lower', [(self.idx_eps, -1.0)]),
        ]
        if self.biased:
            specs.append(('safety_lower', [(self.idx_s, -1.0), (self.idx_x[:, 0], 0.0), (self.idx_x[:, 1], 0.0)]))
            k_l, k_r = self.left_steps, self.right_steps
            specs.append(('safety_left', [(self.idx_s[k_l], 1.0), (self.idx_x[k_l, 0], 0.0),
                                          (self.idx_x[k_l, 1], 0.0)]))
            specs.append(('safety_right', [(self.idx_s[k_r], 1.0), (self.idx_x[k_r, 0], 0.0),
                                           (self.idx_x[k_r, 1], 0.0)]))

        rows, cols, data = [], [], []
        self.blocks = {}
        self._data_slices = {}
        row = 0
        position = 0
        for name, entries in specs:
            count = len(entries[0][0])
            self.blocks[name] = slice(row, row + count)
            start = position
            for columns, values in entries:
                rows.append(row + np.arange(count))
                cols.append(np.asarray(columns, dtype=int))
                data.append(np.broadcast_to(np.asarray(values, dtype=float), (count,)).copy())
                position += count
            self._data_slices[name] = slice(start, position)
            row += count
        self.n_inequalities = row
        self._ineq_pattern = SparsePattern(np.concatenate(rows) if rows else [], np.concatenate(cols) if cols else [],
                                           (self.n_inequalities, self.n_variables))
        self._ineq_data = np.concatenate(data) if data else np.zeros(0)
        self.n_safety_variables = len(self.idx_s)
        logger.debug("Transcription: %d variables, %d equalities, %d inequalities (N=%d, biased=%s)",
                     self.n_variables, self.n_equalities, self.n_inequalities, self.n_steps, self.biased)

    def inequality_blocks(self, z) -> Dict[str, np.ndarray]:
        problem = self.problem
        limits = problem.limits
        tube = problem.tube
        states = z[self.idx_x]
        inputs = z[self.idx_u]
        slacks = z[self.idx_eps]
        lateral = self.lateral_errors(states)
        blocks = {
            'input_upper': inputs - limits.u_max,
            'input_lower': limits.u_min - inputs,
            'kappa_upper': states[1:, KAPPA] - limits.kappa_max,
            'kappa_lower': limits.kappa_min - states[1:, KAPPA],
            'tube_lower': tube.lower - slacks - lateral,
            'tube_upper': lateral - tube.upper - slacks,
            'slack_lower': -slacks,
        }
        if self.biased:
            safety = z[self.idx_s]
            bound_l, _, bound_r, _ = self.safety_bounds(lateral)
            blocks['safety_lower'] = self.safety_floor(lateral)[0] - safety
            blocks['safety_left'] = safety[self.left_steps] - bound_l
            blocks['safety_right'] = safety[self.right_steps] - bound_r
        return blocks

    def inequalities(self, z, with_jacobian: bool = False):
        blocks = self.inequality_blocks(z)
        values = np.concatenate([blocks[name] for name in self.blocks]) if self.blocks else np.zeros(0)
        if not with_jacobian:
            return values
        data = self._ineq_data.copy()
        if self.biased:
            lateral = self.lateral_errors(z[self.idx_x])
            _, slope_l, _, slope_r = self.safety_bounds(lateral)
            k_l, k_r = self.left_steps, self.right_steps
            # left: d = d_ref - e, row = s - f_s(d); right: d = d_ref + e
            for name, steps, factor in (('safety_left', k_l, slope_l), ('safety_right', k_r, -slope_r)):
                chunk = data[self._data_slices[name]]
                count = len(steps)
                chunk[count:2 * count] = factor * self.normal_x[steps]
                chunk[2 * count:] = factor * self.normal_y[steps]
            _, floor_x, floor_y = self.safety_floor(lateral)
            chunk = data[self._data_slices['safety_lower']]
            count = self.n_steps + 1
            chunk[count:2 * count] = floor_x
            chunk[2 * count:] = floor_y
        return values, self._ineq_pattern.matrix(data)

    # -- bundles -----------------------------------------------------------

    def residuals(self, z) -> ConstraintResiduals:
        equality = self.dynamics(z)
        blocks = self.inequality_blocks(z)
        steps = {'safety_left': self.left_steps, 'safety_right': self.right_steps} if self.biased else {}
        return ConstraintResiduals(initial_defect=equality[:STATE_DIM],
                                   dynamics_defects=equality[STATE_DIM:].reshape(-1, STATE_DIM),
                                   inequalities=blocks, safety_steps=steps)

    def linearize(self, z) -> Linearization:
        eq_values, eq_jacobian = self.dynamics(z, with_jacobian=True)
        ineq_values, ineq_jacobian = self.inequalities(z, with_jacobian=True)
        return Linearization(cost=self.cost(z), gradient=self.gradient(z), hessian=self.hessian,
                             eq_values=eq_values, eq_jacobian=eq_jacobian, ineq_values=ineq_values,
                             ineq_jacobian=ineq_jacobian, blocks=dict(self.blocks))

    def violation(self, z) -> float:
        """l1 norm of equality defects plus positive inequality parts."""
        return float(np.abs(self.dynamics(z)).sum() + np.maximum(self.inequalities(z), 0.0).sum())

    # -- feasibility -------------------------------------------------------

    def _curvature_safe_rollout(self, inputs):
        problem = self.problem
        limits = problem.limits
        ts = problem.horizon.ts
        states = np.empty((self.n_steps + 1, STATE_DIM))
        states[0] = self.x_init
        safe = inputs.copy()
        for k in range(self.n_steps):
            kappa_des = states[k, KAPPA_DES]
            low = max(limits.u_min, (limits.kappa_min - kappa_des) / ts)
            high = min(limits.u_max, (limits.kappa_max - kappa_des) / ts)
            if low <= high:
                safe[k] = min(max(safe[k], low), high)
            else:
                safe[k] = limits.u_min if kappa_des > limits.kappa_max else limits.u_max
            states[k + 1] = batch_rk4(states[k][None, :], safe[k], self.speeds[k], problem.model, ts)[0]
        return states, safe

    def restore(self, z) -> np.ndarray:
        """Nearest hard-feasible point: input clipping, forward rollout, minimal slacks, capped safety."""
        problem = self.problem
        limits = problem.limits
        restored = np.array(z, dtype=float)
        inputs = np.clip(restored[self.idx_u], limits.u_min, limits.u_max)
        states = rollout(self.x_init, inputs, self.speeds, problem.model, problem.horizon.ts)
        kappa = states[1:, KAPPA]
        if np.any(kappa > limits.kappa_max + BOUND_TOLERANCE) or np.any(kappa < limits.kappa_min - BOUND_TOLERANCE):
            logger.debug("Rollout leaves curvature bounds, limiting the commanded curvature")
            states, inputs = self._curvature_safe_rollout(inputs)
        restored[self.idx_u] = inputs
        restored[self.idx_x] = states
        lateral = self.lateral_errors(states)
        restored[self.idx_eps] = np.maximum.reduce([np.zeros_like(lateral), problem.tube.lower - lateral,
                                                    lateral - problem.tube.upper])
        if self.biased:
            bound = self.tightest_safety_bound(lateral)[0]
            floor = self.safety_floor(lateral)[0]
            restored[self.idx_s] = np.minimum(np.maximum(restored[self.idx_s], floor), bound)
        return restored

    def initial_guess(self) -> np.ndarray:
        """Zero-input rollout with the safety variables at their target."""
        z = np.zeros(self.n_variables)
        if self.biased:
            z[self.idx_s] = self.problem.s_target
        return self.restore(z)


def evaluate_cost(problem: MpcProblem, variables: DecisionVariables) -> float:
    transcription = MpcTranscription(problem)
    return transcription.cost(transcription.pack(variables))


def evaluate_constraints(problem: MpcProblem, variables: DecisionVariables) -> ConstraintResiduals:
    transcription = MpcTranscription(problem)
    return transcription.residuals(transcription.pack(variables))


def linearize(problem: MpcProblem, variables: DecisionVariables) -> Linearization:
    transcription = MpcTranscription(problem)
    return transcription.linearize(transcription.pack(variables))
