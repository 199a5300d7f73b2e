"""
Sequential quadratic programming for the steering problem.

Gauss-Newton QP subproblems are solved over the stage-sparse transcription,
steps are globalized with a backtracking line search on an l1 merit
function, and every returned iterate is made hard-feasible by a forward
rollout, so the solver never reports infeasibility.
"""
import logging
import time
from typing import Optional, Tuple

import numpy as np

from models import (ControlInput, DecisionVariables, MpcProblem, MpcSolution, SolverConfig, SolverDiagnostics,
                    SolverOutcome, SolverStatus, VehicleState)
from utils.errors import InvalidProblemError
from utils.mpc_problem import Linearization, MpcTranscription
from utils.qp_solver import InteriorPointQp
from utils.vehicle_dynamics import rollout

logger = logging.getLogger(__name__)

ARMIJO_FACTOR = 1e-4
MIN_STEP_LENGTH = 1e-4
MERIT_ROUNDOFF = 100 * np.finfo(float).eps
QP_TOLERANCE_RATIO = 1e-3
ACTIVE_SLACK_THRESHOLD = 1e-7


class SqpSolver:
    """Solver instance; holds per-solve workspace, so use one instance per thread."""

    def __init__(self, config: Optional[SolverConfig] = None):
        self.config = config or SolverConfig()
        self._assembler = None

    def _kkt_residual(self, lin: Linearization, y, lam, scale) -> float:
        stationarity = lin.gradient + lin.eq_jacobian.T @ y + lin.ineq_jacobian.T @ lam
        equality = np.abs(lin.eq_values).max(initial=0.0)
        inequality = np.maximum(lin.ineq_values, 0.0).max(initial=0.0)
        complementarity = np.abs(lam * lin.ineq_values).max(initial=0.0)
        return float(max(np.abs(stationarity).max(initial=0.0) / scale, equality, inequality,
                         complementarity / scale))

    def _solve_subproblem(self, transcription, lin: Linearization):
        scale = transcription.hessian_scale
        config = self.config
        qp = InteriorPointQp(transcription.hessian / scale, lin.gradient / scale, lin.eq_jacobian, -lin.eq_values,
                             lin.ineq_jacobian, -lin.ineq_values,
                             tolerance=config.kkt_tolerance * QP_TOLERANCE_RATIO,
                             max_iterations=config.max_qp_iterations,
                             regularization=config.regularization_epsilon,
                             assembler=self._assembler)
        self._assembler = qp.assembler
        return qp.solve()

    def solve(self, problem: MpcProblem,
              warm_start: Optional[DecisionVariables] = None) -> Tuple[MpcSolution, SolverStatus]:
        config = self.config
        started = time.perf_counter()
        transcription = MpcTranscription(problem)
        self._assembler = None
        scale = transcription.hessian_scale

        if warm_start is not None and config.warm_start:
            z = transcription.restore(transcription.pack(warm_start))
        else:
            z = transcription.initial_guess()

        diagnostics = SolverDiagnostics(n_variables=transcription.n_variables,
                                        n_equalities=transcription.n_equalities,
                                        n_inequalities=transcription.n_inequalities,
                                        n_safety_variables=transcription.n_safety_variables)
        outcome = SolverOutcome.MAX_ITERATIONS
        penalty = 0.0
        multipliers = None
        iterations = 0

        for iteration in range(1, config.max_sqp_iterations + 1):
            lin = transcription.linearize(z)
            if multipliers is not None:
                residual = self._kkt_residual(lin, *multipliers, scale)
                diagnostics.kkt_residual = residual
                if residual <= config.kkt_tolerance:
                    outcome = SolverOutcome.CONVERGED
                    break

            qp = self._solve_subproblem(transcription, lin)
            iterations = iteration
            diagnostics.qp_iterations.append(qp.iterations)
            diagnostics.regularizations += qp.regularizations
            step = qp.x
            y, lam = scale * qp.y, scale * qp.lam
            multipliers = (y, lam)

            residual = self._kkt_residual(lin, y, lam, scale)
            diagnostics.kkt_residual = residual
            if residual <= config.kkt_tolerance:
                z = z + step
                diagnostics.step_lengths.append(1.0)
                outcome = SolverOutcome.CONVERGED
                break

            penalty = max(penalty, 2.0 * max(np.abs(y).max(initial=0.0), np.abs(lam).max(initial=0.0)))
            violation = transcription.violation(z)
            merit = lin.cost + penalty * violation
            slope = float(lin.gradient @ step) - penalty * violation
            if slope >= 0.0:
                slope = -ARMIJO_FACTOR * float(step @ step)
            # merit values agreeing to round-off count as no increase
            roundoff = MERIT_ROUNDOFF * max(1.0, abs(merit))

            length = 1.0
            accepted = None
            while length >= MIN_STEP_LENGTH:
                trial = z + length * step
                trial_merit = transcription.cost(trial) + penalty * transcription.violation(trial)
                if trial_merit <= merit + ARMIJO_FACTOR * length * slope + roundoff:
                    accepted = trial
                    break
                length *= 0.5
            if accepted is None:
                outcome = SolverOutcome.STALLED
                logger.warning("Line search failed at SQP iteration %d (kkt %.2e); keeping the current iterate",
                               iteration, residual)
                break

            diagnostics.merit_history.append((merit, trial_merit))
            diagnostics.step_lengths.append(length)
            z = accepted
            logger.debug("SQP iteration %d: kkt %.3e, step %.3g, merit %.6g -> %.6g", iteration, residual,
                         length, merit, trial_merit)

            if config.time_budget > 0 and time.perf_counter() - started > config.time_budget:
                outcome = SolverOutcome.TIME_BUDGET_HIT
                logger.warning("Time budget of %.1f ms hit after %d SQP iterations",
                               1e3 * config.time_budget, iteration)
                break
        else:
            logger.warning("SQP reached %d iterations without converging (kkt %.2e)",
                           config.max_sqp_iterations, diagnostics.kkt_residual)

        z = transcription.restore(z)
        variables = transcription.unpack(z)
        residuals = transcription.residuals(z)
        wall_time = time.perf_counter() - started

        diagnostics.iterations = iterations
        diagnostics.solve_time = wall_time
        diagnostics.max_hard_violation = residuals.max_violation
        diagnostics.active_slacks = [(int(k), float(value)) for k, value in enumerate(variables.slacks)
                                     if value > ACTIVE_SLACK_THRESHOLD]
        solution = MpcSolution(variables=variables, objective=transcription.cost(z),
                               first_input=ControlInput(float(variables.inputs[0])), diagnostics=diagnostics)
        status = SolverStatus(outcome=outcome, kkt_residual=diagnostics.kkt_residual, iterations=iterations,
                              wall_time=wall_time)
        return solution, status


def solve(problem: MpcProblem, config: Optional[SolverConfig] = None,
          warm_start: Optional[DecisionVariables] = None) -> Tuple[MpcSolution, SolverStatus]:
    return SqpSolver(config).solve(problem, warm_start)


def warm_start_shift(previous: DecisionVariables, new_initial: VehicleState,
                     problem: MpcProblem) -> DecisionVariables:
    """Shift the previous solution one stage, duplicate its last stage and roll out from new_initial."""
    if previous.n_steps != problem.n_steps:
        raise InvalidProblemError(f"previous solution has {previous.n_steps} steps, problem has {problem.n_steps}")

    def shifted(values):
        return np.concatenate([values[1:], values[-1:]])

    inputs = shifted(previous.inputs)
    states = rollout(new_initial.as_array(), inputs, problem.reference.speeds, problem.model, problem.horizon.ts)
    return DecisionVariables(states, inputs, shifted(previous.slacks), shifted(previous.safety))
