import itertools
import unittest
from unittest import mock

import numpy as np
import scipy.sparse as sp

from models import (CostWeights, DecisionVariables, Limits, MpcProblem, ObjectClass, ObjectTrack, Side, SolverConfig,
                    SolverOutcome)
from test_mpc_problem import abreast_object, random_problem, straight_problem
from utils.errors import InvalidProblemError
from utils.mpc_problem import MpcTranscription, evaluate_constraints
from utils.nlp_solver import SqpSolver, solve, warm_start_shift
from utils.qp_solver import InteriorPointQp, KktAssembler, solve_qp
from utils.reference_tube import build_tube


class TestInteriorPointQp(unittest.TestCase):
    """Sparse primal-dual QP subsolver"""

    def test_equality_and_active_bound(self):
        """min 1/2|x|^2 - 2x0 - 2x1 with x0 + x1 = 1 and x0 <= 0.2 ends at (0.2, 0.8)"""
        result = solve_qp(sp.identity(2, format='csc'), [-2.0, -2.0], sp.csc_matrix([[1.0, 1.0]]), [1.0],
                          sp.csc_matrix([[1.0, 0.0]]), [0.2])
        self.assertTrue(result.converged)
        np.testing.assert_allclose(result.x, [0.2, 0.8], atol=1e-7)
        self.assertAlmostEqual(result.lam[0], 0.6, delta=1e-6)

    def test_inactive_bound(self):
        """A slack bound leaves the equality-constrained optimum and a zero multiplier"""
        result = solve_qp(sp.identity(2, format='csc'), [-2.0, -2.0], sp.csc_matrix([[1.0, 1.0]]), [1.0],
                          sp.csc_matrix([[1.0, 0.0]]), [5.0])
        np.testing.assert_allclose(result.x, [0.5, 0.5], atol=1e-7)
        self.assertLess(result.lam[0], 1e-6)

    def test_assembler_reused_for_same_pattern(self):
        """The KKT plan matches any matrices with the same sparsity"""
        P = sp.identity(2, format='csc')
        A = sp.csc_matrix((0, 2))
        assembler = KktAssembler(P, A, sp.csr_matrix([[1.0, 0.0], [0.0, -1.0]]))
        self.assertTrue(assembler.matches(2.0 * P, A, sp.csr_matrix([[3.0, 0.0], [0.0, 2.0]])))
        self.assertFalse(assembler.matches(P, A, sp.csr_matrix([[3.0, 1.0], [0.0, 2.0]])))
        self.assertFalse(assembler.matches(P, sp.csc_matrix([[1.0, 1.0]]), sp.csr_matrix([[3.0, 0.0], [0.0, 2.0]])))

    def test_reused_plan_takes_current_values(self):
        """A plan built for x0 + x1 = 1 solves 2 x0 + x1 = 1 with the new coefficients"""
        P = sp.identity(2, format='csc')
        G = sp.csc_matrix([[1.0, 0.0]])
        first = InteriorPointQp(P, [-2.0, -2.0], sp.csc_matrix([[1.0, 1.0]]), [1.0], G, [5.0])
        np.testing.assert_allclose(first.solve().x, [0.5, 0.5], atol=1e-7)
        second = InteriorPointQp(P, [-2.0, -2.0], sp.csc_matrix([[2.0, 1.0]]), [1.0], G, [5.0],
                                 assembler=first.assembler)
        self.assertIs(second.assembler, first.assembler)
        result = second.solve()
        self.assertTrue(result.converged)
        np.testing.assert_allclose(result.x, [0.0, 1.0], atol=1e-7)
        self.assertAlmostEqual(result.y[0], 1.0, delta=1e-6)


def horizon_qp(n_steps):
    """The first SQP subproblem of a straight-road problem with a pedestrian on the right at every step."""
    n_points = n_steps + 1
    pedestrian = ObjectTrack('ped', ObjectClass.PEDESTRIAN, (Side.RIGHT,) * n_points, np.full(n_points, 1.0),
                             np.full(n_points, 2.0))
    transcription = MpcTranscription(straight_problem(n_steps=n_steps, objects=[pedestrian]))
    lin = transcription.linearize(transcription.initial_guess())
    return InteriorPointQp(transcription.hessian, lin.gradient, lin.eq_jacobian, -lin.eq_values,
                           lin.ineq_jacobian, -lin.ineq_values)


class TestKktOrdering(unittest.TestCase):
    """Stage-banded ordering of the Newton system"""

    def bandwidth(self, qp):
        kkt = qp.kkt_matrix(np.ones(qp.m)).tocoo()
        return int(np.abs(kkt.row - kkt.col).max())

    def test_bandwidth_independent_of_horizon(self):
        """Dynamics rows are interleaved with their stages, so the band does not widen with N"""
        short, long = horizon_qp(10), horizon_qp(60)
        self.assertEqual(self.bandwidth(short), self.bandwidth(long))
        self.assertLess(self.bandwidth(long), 2 * (long.n + long.p) // 61)

    def test_factor_fill_linear_in_horizon(self):
        """LU fill at N = 60 stays proportional to the fill at N = 20"""
        fill = {}
        for n_steps in (20, 60):
            qp = horizon_qp(n_steps)
            lu = qp.factorize(np.ones(qp.m))
            fill[n_steps] = lu.L.nnz + lu.U.nnz
        self.assertLessEqual(fill[60], 3.5 * fill[20])

    def test_permuted_solve_matches_original_system(self):
        """Solving through the permutation satisfies the KKT system in its original order"""
        qp = horizon_qp(3)
        rng = np.random.default_rng(5)
        D = rng.uniform(0.5, 2.0, qp.m)
        kkt = sp.bmat([[qp.P + qp.G.T @ sp.diags(D) @ qp.G, qp.A.T], [qp.A, None]]).toarray()
        rhs = rng.normal(size=qp.n + qp.p)
        solution = qp.assembler.solve(qp.factorize(D), rhs)
        np.testing.assert_allclose(kkt @ solution, rhs, atol=1e-8)


class TestSqpSolver(unittest.TestCase):
    """Sequential quadratic programming on the steering problem"""

    def setUp(self):
        self.config = SolverConfig(max_sqp_iterations=50)
        self.rng = np.random.default_rng(17)

    def test_on_reference_start(self):
        """Starting on a straight reference without objects the optimum is zero input and zero cost"""
        solution, status = solve(straight_problem(n_steps=20), self.config)
        self.assertEqual(status.outcome, SolverOutcome.CONVERGED)
        self.assertLess(np.abs(solution.variables.inputs).max(), 1e-6)
        self.assertLess(solution.objective, 1e-9)
        np.testing.assert_allclose(solution.variables.safety, 1.0, atol=1e-9)
        self.assertGreaterEqual(status.iterations, 1)

    def test_matches_grid_search(self):
        """N = 2 lateral-offset recovery agrees with a brute-force grid over both inputs"""
        weights = CostWeights(q1=10.0, q2=0.0, q3=0.0, p1=10.0, p2=0.0, p3=0.0, r_input=1.0, alpha=0.0)
        problem = straight_problem(n_steps=2, speed=10.0, ts=0.1, weights=weights, lane=3.0, offset=0.5)
        solution, status = solve(problem, self.config)
        self.assertEqual(status.outcome, SolverOutcome.CONVERGED)

        transcription = MpcTranscription(problem)
        grid = np.arange(-0.3, 0.3 + 1e-12, 0.005)
        best_cost, best_inputs = np.inf, None
        for inputs in itertools.product(grid, repeat=2):
            z = np.zeros(transcription.n_variables)
            z[transcription.idx_u] = inputs
            cost = transcription.cost(transcription.restore(z))
            if cost < best_cost:
                best_cost, best_inputs = cost, np.array(inputs)
        self.assertLessEqual(solution.objective, best_cost + 1e-9)
        np.testing.assert_allclose(solution.variables.inputs, best_inputs, atol=0.005)

    def test_crossed_tube_needs_half_gap_slack(self):
        """Crossed bounds are absorbed by a slack of at least half the overlap"""
        problem = straight_problem(n_steps=10)
        tube = build_tube(1.7, vehicle_half_width=0.9, n_points=11)
        tube.lower[5], tube.upper[5] = 0.3, 0.1
        problem = MpcProblem(problem.horizon, problem.model, problem.weights, problem.limits, problem.reference,
                             tube, problem.clearance, problem.initial_state, problem.safety_params)
        solution, status = solve(problem, self.config)
        self.assertEqual(status.outcome, SolverOutcome.CONVERGED)
        self.assertGreaterEqual(solution.variables.slacks[5], 0.1 - 1e-6)
        self.assertIn(5, [k for k, _ in solution.diagnostics.active_slacks])

    def test_solutions_are_hard_feasible(self):
        """Returned iterates satisfy dynamics, boxes, slack signs and safety bounds"""
        for trial in range(20):
            problem = random_problem(self.rng, n_steps=12, crossed=trial % 2 == 0)
            solution, _ = SqpSolver().solve(problem)
            residuals = evaluate_constraints(problem, solution.variables)
            self.assertLess(residuals.max_violation, 1e-6)
            self.assertTrue(np.all(solution.variables.slacks >= 0.0))
            self.assertTrue(np.isfinite(solution.objective))
            limits = problem.limits
            self.assertTrue(limits.u_min <= solution.first_input.u <= limits.u_max)

    def test_positive_s_min_next_to_object(self):
        """With s_min = 0.5 and an object abreast on the right the solve stays hard-feasible and leans left"""
        problem = straight_problem(n_steps=10, objects=[abreast_object(11)], limits=Limits(s_min=0.5))
        solution, status = solve(problem, self.config)
        self.assertEqual(status.outcome, SolverOutcome.CONVERGED)
        self.assertLess(evaluate_constraints(problem, solution.variables).max_violation, 1e-6)
        self.assertTrue(np.all(solution.variables.safety >= 0.0))
        self.assertLess(solution.variables.safety[0], 0.5)
        self.assertGreater(solution.variables.states[-1, 1], 0.0)

    def test_merit_never_increases(self):
        """Every accepted step lowers the merit function"""
        for _ in range(10):
            solution, _ = SqpSolver(self.config).solve(random_problem(self.rng, n_steps=10))
            for before, after in solution.diagnostics.merit_history:
                self.assertLessEqual(after, before + 1e-9 * max(1.0, abs(before)))

    def test_weight_scaling_keeps_solution(self):
        """Scaling every weight by a common factor leaves the first input unchanged"""
        for _ in range(5):
            problem = random_problem(self.rng, n_steps=8)
            scaled = MpcProblem(problem.horizon, problem.model, problem.weights.scaled(4.0), problem.limits,
                                problem.reference, problem.tube, problem.clearance, problem.initial_state,
                                problem.safety_params, problem.s_target)
            first, _ = solve(problem, self.config)
            second, _ = solve(scaled, self.config)
            self.assertAlmostEqual(first.first_input.u, second.first_input.u, delta=1e-8)

    def test_deterministic(self):
        """Identical inputs give bit-identical results"""
        problem = random_problem(self.rng, n_steps=10)
        first, first_status = solve(problem, self.config)
        second, second_status = solve(problem, self.config)
        np.testing.assert_array_equal(first.variables.states, second.variables.states)
        np.testing.assert_array_equal(first.variables.inputs, second.variables.inputs)
        self.assertEqual(first_status.iterations, second_status.iterations)

    def test_resolve_from_own_solution(self):
        """Warm-starting from a converged solution converges again within two iterations"""
        problem = random_problem(self.rng, n_steps=15)
        solver = SqpSolver(self.config)
        solution, status = solver.solve(problem)
        self.assertEqual(status.outcome, SolverOutcome.CONVERGED)
        _, again = solver.solve(problem, warm_start=solution.variables)
        self.assertEqual(again.outcome, SolverOutcome.CONVERGED)
        self.assertLessEqual(again.iterations, 2)

    def test_time_budget(self):
        """A tiny budget stops after one iteration with a feasible iterate"""
        problem = random_problem(self.rng, n_steps=30)
        config = SolverConfig(max_sqp_iterations=50, kkt_tolerance=1e-14, time_budget=1e-9)
        solution, status = solve(problem, config)
        self.assertIn(status.outcome, (SolverOutcome.TIME_BUDGET_HIT, SolverOutcome.CONVERGED, SolverOutcome.STALLED))
        self.assertLessEqual(status.iterations, 1)
        self.assertLess(evaluate_constraints(problem, solution.variables).max_violation, 1e-6)
        self.assertGreaterEqual(status.wall_time, 0.0)

    def test_failed_line_search_is_reported_as_stall(self):
        """A rejected step ends the solve as stalled, not as an exhausted iteration cap"""
        problem = straight_problem(n_steps=10, offset=0.5)
        config = SolverConfig(max_sqp_iterations=20, kkt_tolerance=1e-14)
        with mock.patch('utils.nlp_solver.MIN_STEP_LENGTH', 2.0), self.assertLogs('utils.nlp_solver', 'WARNING'):
            solution, status = solve(problem, config)
        self.assertEqual(status.outcome, SolverOutcome.STALLED)
        self.assertEqual(status.iterations, 1)
        self.assertEqual(solution.diagnostics.merit_history, [])
        self.assertLess(evaluate_constraints(problem, solution.variables).max_violation, 1e-6)

    def test_diagnostics_report_dimensions(self):
        """Diagnostics carry the transcription size"""
        problem = straight_problem(n_steps=6)
        solution, _ = solve(problem)
        transcription = MpcTranscription(problem)
        self.assertEqual(solution.diagnostics.n_variables, transcription.n_variables)
        self.assertEqual(solution.diagnostics.n_safety_variables, 7)
        self.assertEqual(len(solution.diagnostics.qp_iterations), solution.diagnostics.iterations)


class TestWarmStartShift(unittest.TestCase):
    """Receding-horizon shift of the previous solution"""

    def setUp(self):
        self.rng = np.random.default_rng(23)

    def test_shift_is_defect_free(self):
        """The shifted guess is re-rolled so every dynamics defect vanishes"""
        problem = random_problem(self.rng, n_steps=10)
        solution, _ = solve(problem)
        shifted = warm_start_shift(solution.variables, problem.initial_state, problem)
        np.testing.assert_array_equal(shifted.inputs[:-1], solution.variables.inputs[1:])
        self.assertEqual(shifted.inputs[-1], solution.variables.inputs[-1])
        self.assertLess(evaluate_constraints(problem, shifted).max_defect, 1e-12)

    def test_single_step_horizon(self):
        """With N = 1 the single stage is duplicated"""
        problem = straight_problem(n_steps=1)
        previous = DecisionVariables(np.zeros((2, 5)), [0.1], [0.0, 0.2], [0.5, 0.7])
        shifted = warm_start_shift(previous, problem.initial_state, problem)
        np.testing.assert_array_equal(shifted.inputs, [0.1])
        np.testing.assert_array_equal(shifted.slacks, [0.2, 0.2])
        np.testing.assert_array_equal(shifted.safety, [0.7, 0.7])

    def test_horizon_mismatch(self):
        """A previous solution of another length is rejected"""
        problem = straight_problem(n_steps=3)
        previous = DecisionVariables(np.zeros((3, 5)), [0.0, 0.0], np.zeros(3), np.zeros(3))
        with self.assertRaises(InvalidProblemError):
            warm_start_shift(previous, problem.initial_state, problem)

    def test_receding_horizon_iterations(self):
        """Warm-started cycles on a straight road converge within five iterations"""
        solver = SqpSolver(SolverConfig(max_sqp_iterations=50))
        problem = straight_problem(n_steps=30, offset=0.4)
        solution, _ = solver.solve(problem)
        base = straight_problem(n_steps=30)
        for _ in range(5):
            state = solution.variables.state(1)
            problem = MpcProblem(base.horizon, base.model, base.weights, base.limits, base.reference, base.tube,
                                 base.clearance, state, base.safety_params)
            guess = warm_start_shift(solution.variables, state, problem)
            solution, status = solver.solve(problem, warm_start=guess)
            self.assertEqual(status.outcome, SolverOutcome.CONVERGED)
            self.assertLessEqual(status.iterations, 5)


if __name__ == '__main__':
    unittest.main()
