import math
import unittest
from dataclasses import replace

import numpy as np
import pytest

from robot_navigation_simulation.geometry import Disc, GeometricPath, Segment, Vec2
from robot_navigation_simulation.heuristic_planner import extract_reference
from robot_navigation_simulation.tube_mpc import (
    TIME_EXPONENT,
    InvalidTmpcConfigError,
    TmpcConfig,
    TmpcProblem,
    TrajectoryLengthError,
    TubeDomainError,
    TubeParameters,
    ancillary_input,
    audit_constraints,
    braking_inputs,
    build_constraints,
    discount_weights,
    is_stabilizing,
    jacobians,
    objective,
    planning_radius,
    safest_inputs,
    solve,
    spectral_radius,
    synthesize_gain,
    tube_width,
    tube_width_obstacle,
    tube_width_robot,
)
from robot_navigation_simulation.world_simulation import (
    PerceivedObstacle,
    PerceptionSnapshot,
    RobotLimits,
    RobotState,
    propagate_nominal,
)

STATICS = (Disc(Vec2(3.0, 3.0), 0.3), Disc(Vec2(3.0, 1.0), 0.3))
DYNAMIC = (PerceivedObstacle(0, Vec2(4.0, 2.0), Vec2(-0.3, 0.0)),)


def _problem(horizon=5, control_horizon=None, statics=(), dynamics=(), plan_radius=None, time_step=0):
    config = TmpcConfig(horizon=horizon, control_horizon=control_horizon or horizon)
    state = RobotState(2.0, 2.0, 0.0, 0.5, 0.0, time_step)
    path = GeometricPath((Segment(Vec2(2.0, 2.0), Vec2(8.0, 2.0)),))
    reference = extract_reference(path, horizon, 0.1, 0.5, time_step)
    snapshot = PerceptionSnapshot(tuple(statics), tuple(dynamics), state, perception_radius=3.0)
    if plan_radius is None:
        plan_radius = planning_radius(state.pose, reference.states, config.safety_radius)
    return TmpcProblem(state, np.array([0.5, 0.0]), reference, snapshot, config, plan_radius)


def _difference(function, point, offset):
    return (function(point + offset) - function(point - offset)) / (2.0 * np.linalg.norm(offset))


class TestTubeWidths(unittest.TestCase):
    def test_first_width_is_the_bound(self):
        self.assertEqual(tube_width(4, 3, 0.05, 0.2), 0.05)

    def test_geometric_sum(self):
        self.assertAlmostEqual(tube_width(3, 0, 0.05, 0.2), 0.122)

    def test_fully_damped(self):
        for step in range(1, 8):
            self.assertAlmostEqual(tube_width(step, 0, 0.05, 1.0), 0.05)

    def test_closed_form(self):
        tube = TubeParameters(robot_bound=0.01, robot_damping=0.2, obstacle_bound=0.02, obstacle_damping=0.3)
        for offset in range(1, 10):
            self.assertAlmostEqual(tube_width_robot(5 + offset, 5, tube), 0.01 * (1.0 - 0.8**offset) / 0.2)
            self.assertAlmostEqual(tube_width_obstacle(5 + offset, 5, tube), 0.02 * (1.0 - 0.7**offset) / 0.3)

    def test_strictly_increasing(self):
        widths = [tube_width(step, 0, 0.02, 0.2) for step in range(1, 10)]
        self.assertTrue(all(later > earlier for earlier, later in zip(widths, widths[1:])))

    def test_domain_errors(self):
        with self.assertRaises(TubeDomainError):
            tube_width(3, 3, 0.05, 0.2)
        with self.assertRaises(TubeDomainError):
            tube_width(4, 3, 0.05, 1.2)
        with self.assertRaises(TubeDomainError):
            tube_width(4, 3, -0.05, 0.2)


class TestObjective(unittest.TestCase):
    def setUp(self):
        self.reference = np.column_stack((np.linspace(0.1, 0.5, 5), np.zeros(5), np.zeros(5)))

    def test_perfect_tracking_without_input(self):
        self.assertEqual(objective(self.reference, np.zeros((5, 2)), self.reference, 0.9, 0.01), 0.0)

    def test_single_step_offset(self):
        states = self.reference.copy()
        states[0, 1] += 1.0
        self.assertAlmostEqual(objective(states, np.zeros((5, 2)), self.reference, 0.9, 0.01), 0.9)

    def test_input_effort(self):
        inputs = np.tile([1.0, 0.0], (5, 1))
        self.assertAlmostEqual(objective(self.reference, inputs, self.reference, 0.9, 0.01), 0.05)

    def test_heading_error_wraps(self):
        states = self.reference.copy()
        states[:, 2] = 2.0 * math.pi
        self.assertAlmostEqual(objective(states, np.zeros((5, 2)), self.reference, 0.9, 0.0), 0.0)

    def test_length_mismatch(self):
        with self.assertRaises(TrajectoryLengthError):
            objective(self.reference, np.zeros((4, 2)), self.reference, 0.9, 0.01)

    def test_discount_modes(self):
        np.testing.assert_allclose(discount_weights(3, 0.9), [0.9, 0.81, 0.729])
        np.testing.assert_allclose(discount_weights(3, 0.9, TIME_EXPONENT, 0), [0.9, 0.81, 0.729])
        np.testing.assert_allclose(discount_weights(2, 0.81, TIME_EXPONENT, 1), [0.81, 0.81**1.5])
        with self.assertRaises(InvalidTmpcConfigError):
            discount_weights(2, 0.9, "absolute")


class TestConfiguration(unittest.TestCase):
    def test_invalid_horizons(self):
        with self.assertRaises(InvalidTmpcConfigError):
            TmpcConfig(horizon=5, control_horizon=6).validate()
        with self.assertRaises(InvalidTmpcConfigError):
            TmpcConfig(horizon=5, control_horizon=0).validate()

    def test_invalid_weights(self):
        with self.assertRaises(InvalidTmpcConfigError):
            TmpcConfig(w1=1.0).validate()
        with self.assertRaises(InvalidTmpcConfigError):
            TmpcConfig(w2=-0.1).validate()

    def test_invalid_damping(self):
        with self.assertRaises(TubeDomainError):
            TmpcConfig(tube=TubeParameters(robot_damping=1.5)).validate()

    def test_reference_length_must_match_horizon(self):
        problem = _problem()
        with self.assertRaises(TrajectoryLengthError):
            TmpcProblem(
                problem.current_state, problem.previous_input, problem.reference, problem.snapshot,
                TmpcConfig(horizon=4, control_horizon=4), problem.plan_radius,
            )

    def test_planning_radius_must_exceed_safety_radius(self):
        with self.assertRaises(InvalidTmpcConfigError):
            _problem(plan_radius=0.6)

    def test_planning_radius_floor(self):
        states = np.array([[2.0, 2.0, 0.0], [2.01, 2.0, 0.0]])
        self.assertAlmostEqual(planning_radius(np.array([2.0, 2.0, 0.0]), states, 0.6), 0.7)
        self.assertAlmostEqual(planning_radius(np.array([0.0, 0.0, 0.0]), states, 0.6), 0.6 + math.hypot(2.01, 2.0))


class TestConstraints(unittest.TestCase):
    def test_free_space_has_no_separations(self):
        constraints = build_constraints(_problem())
        self.assertEqual(
            constraints.labels(), ["dynamics", "input_box", "input_slew", "perception_zone", "state_box"]
        )
        for label in constraints.labels():
            self.assertEqual(constraints.count(label), 5)

    def test_counts_with_obstacles(self):
        constraints = build_constraints(_problem(statics=STATICS, dynamics=DYNAMIC))
        self.assertEqual(constraints.count("static_separation"), 10)
        self.assertEqual(constraints.count("dynamic_separation_previous"), 4)
        self.assertEqual(constraints.count("dynamic_separation_current"), 5)
        self.assertEqual(constraints.count("dynamic_separation_next"), 4)

    def test_excluded_steps(self):
        constraints = build_constraints(_problem(statics=STATICS, dynamics=DYNAMIC, time_step=3))
        steps = {
            label: sorted(record.step for record in constraints.records if record.label == label)
            for label in ("dynamic_separation_previous", "dynamic_separation_next")
        }
        self.assertEqual(steps["dynamic_separation_previous"], [5, 6, 7, 8])
        self.assertEqual(steps["dynamic_separation_next"], [4, 5, 6, 7])

    def test_separation_bounds_grow_with_the_tubes(self):
        constraints = build_constraints(_problem(statics=STATICS, dynamics=DYNAMIC))
        static = [record.bound for record in constraints.records if record.label == "static_separation"][:5]
        self.assertAlmostEqual(static[0], 0.61)
        self.assertTrue(all(later > earlier for earlier, later in zip(static, static[1:])))
        current = [record for record in constraints.records if record.label == "dynamic_separation_current"]
        self.assertAlmostEqual(current[0].bound, 0.63)
        np.testing.assert_allclose(current[1].center, (4.0 - 0.06, 2.0))

    def test_larger_obstacle_tube_is_more_conservative(self):
        problem = _problem(dynamics=(PerceivedObstacle(0, Vec2(2.9, 2.0), Vec2(-0.3, 0.0)),))
        states = np.asarray(problem.reference.states)[None]
        bounds, violations = [], []
        for obstacle_bound in (0.0, 0.01, 0.02, 0.05, 0.1):
            config = replace(problem.config, tube=TubeParameters(obstacle_bound=obstacle_bound))
            constraints = build_constraints(replace(problem, config=config))
            bounds.append([record.bound for record in constraints.records if record.label.startswith("dynamic")])
            violations.append(constraints.separation_violations(states)[0])
        self.assertTrue(np.all(np.diff(bounds, axis=0) >= 0.0))
        self.assertTrue(all(later >= earlier for earlier, later in zip(violations, violations[1:])))
        self.assertGreater(violations[-1], violations[0])

    def test_audit_detects_violations(self):
        problem = _problem(statics=(Disc(Vec2(2.15, 2.3), 0.3),))
        constraints = build_constraints(problem)
        inputs = np.asarray(problem.reference.inputs)
        violation = audit_constraints(problem, constraints, np.asarray(problem.reference.states), inputs)
        self.assertGreater(violation, 0.1)
        self.assertGreater(constraints.violations(problem.reference.states[None], inputs[None])[0], 0.0)


@pytest.mark.parametrize("horizon", [2, 3, 5, 8])
def test_constraint_counts_for_horizons(horizon):
    constraints = build_constraints(_problem(horizon=horizon, statics=STATICS, dynamics=DYNAMIC))
    assert constraints.count("static_separation") == 2 * horizon
    assert constraints.count("dynamic_separation_previous") == horizon - 1
    assert constraints.count("dynamic_separation_current") == horizon
    assert constraints.count("dynamic_separation_next") == horizon - 1
    assert constraints.count("obstacle_prediction") == horizon


class TestFeedback(unittest.TestCase):
    def test_jacobians_at_zero_heading(self):
        a_matrix, b_matrix = jacobians(np.array([1.0, 2.0, 0.0]), (0.5, 0.4), 0.1)
        np.testing.assert_allclose(a_matrix, [[1.0, 0.0, -0.002], [0.0, 1.0, 0.05], [0.0, 0.0, 1.0]])
        np.testing.assert_allclose(b_matrix, [[0.1, 0.0], [0.004, 0.005], [0.0, 0.1]])

    def test_jacobians_match_finite_differences(self):
        rng = np.random.default_rng(9)
        step = 1e-6
        for _ in range(100):
            pose = np.array([rng.uniform(0.0, 14.0), rng.uniform(0.0, 14.0), rng.uniform(-2.5, 2.5)])
            control = np.array([rng.uniform(0.0, 1.0), rng.uniform(-1.5, 1.5)])
            a_matrix, b_matrix = jacobians(pose, control, 0.1)
            for column, offset in enumerate(np.eye(3) * step):
                numeric = _difference(lambda p: propagate_nominal(p, control, 0.1), pose, offset)
                np.testing.assert_allclose(a_matrix[:, column], numeric, rtol=1e-6, atol=1e-8)
            for column, offset in enumerate(np.eye(2) * step):
                numeric = _difference(lambda u: propagate_nominal(pose, u, 0.1), control, offset)
                np.testing.assert_allclose(b_matrix[:, column], numeric, rtol=1e-6, atol=1e-8)

    def test_synthesized_gains_are_stabilizing(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            state = np.array([5.0, 5.0, rng.uniform(-math.pi, math.pi)])
            control = np.array([rng.uniform(0.1, 1.0), rng.uniform(-1.5, 1.5)])
            feedback = synthesize_gain(state, control, 0.1)
            self.assertEqual(feedback.gain.shape, (2, 3))
            self.assertLess(feedback.spectral_radius, 1.0)
            self.assertTrue(is_stabilizing(feedback.a_matrix, feedback.b_matrix, feedback.gain))

    def test_standing_reference_is_regularized(self):
        feedback = synthesize_gain(np.array([5.0, 5.0, 0.3]), np.array([0.0, 0.0]), 0.1)
        self.assertLess(spectral_radius(feedback.a_matrix + feedback.b_matrix @ feedback.gain), 1.0)

    def test_zero_gain_is_rejected(self):
        a_matrix, b_matrix = jacobians(np.array([0.0, 0.0, 0.0]), (0.5, 0.0), 0.1)
        self.assertFalse(is_stabilizing(a_matrix, b_matrix, np.zeros((2, 3))))


class TestAncillaryInput(unittest.TestCase):
    def setUp(self):
        self.limits = RobotLimits()
        self.gain = np.array([[-0.1, 0.0, 0.0], [0.0, -0.2, -0.3]])
        self.reference_state = np.array([3.0, 3.0, 0.2])

    def test_zero_error(self):
        reference = self.reference_state
        control, clamped = ancillary_input((0.5, 0.1), self.gain, reference, reference, self.limits)
        np.testing.assert_allclose(control, [0.5, 0.1])
        self.assertFalse(clamped)

    def test_unit_position_error(self):
        state = self.reference_state + np.array([1.0, 0.0, 0.0])
        control, clamped = ancillary_input((0.5, 0.1), self.gain, state, self.reference_state, self.limits)
        np.testing.assert_allclose(control, [0.4, 0.1])
        self.assertFalse(clamped)

    def test_saturation(self):
        state = self.reference_state + np.array([0.0, 10.0, 0.0])
        control, clamped = ancillary_input((0.5, 0.1), self.gain, state, self.reference_state, self.limits)
        np.testing.assert_allclose(control, [0.5, -1.5])
        self.assertTrue(clamped)


class TestSolve(unittest.TestCase):
    def test_on_reference_in_free_space(self):
        problem = _problem()
        solution = solve(problem, None, np.random.default_rng(0))
        self.assertTrue(solution.feasible)
        np.testing.assert_allclose(solution.inputs, problem.reference.inputs, atol=1e-3)
        self.assertAlmostEqual(solution.objective, 0.01 * 5 * 0.25, delta=1e-3)
        np.testing.assert_allclose(solution.first_input, solution.inputs[0])

    def test_avoids_obstacle_on_reference(self):
        obstacle = Disc(Vec2(2.45, 2.5), 0.3)
        problem = _problem(statics=(obstacle,), plan_radius=1.5)
        solution = solve(problem, None, np.random.default_rng(1))
        self.assertTrue(solution.feasible)
        widths = solution.robot_tube
        gaps = np.linalg.norm(solution.predicted_states[:, :2] - obstacle.center.as_array(), axis=1)
        self.assertTrue(np.all(gaps >= 0.6 + widths - 1e-6))
        self.assertLessEqual(solution.max_violation, 1e-6)

    def test_control_horizon_ties_the_tail(self):
        solution = solve(_problem(control_horizon=3), None, np.random.default_rng(2))
        np.testing.assert_array_equal(solution.inputs[2], solution.inputs[3])
        np.testing.assert_array_equal(solution.inputs[3], solution.inputs[4])
        self.assertEqual(solution.warm_start().shape, (6,))

    def test_warm_start_is_never_worsened(self):
        problem = _problem(statics=(Disc(Vec2(2.45, 2.5), 0.3),), plan_radius=1.5)
        converged = solve(problem, None, np.random.default_rng(1))
        warm = converged.inputs[: problem.config.control_horizon].reshape(-1)
        rushed = solve(problem, 0.01, np.random.default_rng(6), warm_start=warm)
        self.assertLessEqual(rushed.evaluations, 200)
        self.assertLessEqual(rushed.objective, converged.objective + 1e-3)

    def test_iteration_budget_limits_modeled_time(self):
        solution = solve(_problem(), 0.15, np.random.default_rng(3))
        self.assertLessEqual(solution.evaluations, int(0.15 / 5e-5))
        self.assertLessEqual(solution.solve_time, 0.15 + 1e-12)

    def test_diagnostics(self):
        diagnostics = solve(_problem(statics=STATICS), None, np.random.default_rng(4)).diagnostics()
        self.assertAlmostEqual(diagnostics["robot_tube"], 0.01)
        self.assertAlmostEqual(diagnostics["obstacle_tube"], 0.02)
        self.assertIn("feasible", diagnostics)


def test_braking_inputs():
    sequences = braking_inputs(np.array([1.0, 0.2]), RobotLimits(), 5)
    assert sequences.shape == (3, 5, 2)
    np.testing.assert_allclose(sequences[:, :, 0], np.tile([0.5, 0.0, 0.0, 0.0, 0.0], (3, 1)))
    np.testing.assert_allclose(sequences[:, 0, 1], [0.0, -1.5, 1.5])


def test_safest_inputs_avoids_obstacle_ahead():
    problem = _problem(statics=(Disc(Vec2(2.7, 2.0), 0.3),), plan_radius=1.5)
    driving = np.tile([1.0, 0.0], (5, 1))
    braking = braking_inputs(problem.previous_input, problem.config.limits, 5)
    index, violation = safest_inputs(problem, np.concatenate((driving[None, :, :], braking)))
    assert index == 1
    assert violation == 0.0
    constraints = build_constraints(problem)
    states = np.array([propagate_nominal(problem.current_state.pose, [1.0, 0.0], 0.1 * k) for k in range(1, 6)])
    assert constraints.separation_violations(states[None, :, :])[0] > 0.0


def test_safest_inputs_keeps_order_on_ties():
    problem = _problem()
    braking = braking_inputs(problem.previous_input, problem.config.limits, 5)
    assert safest_inputs(problem, braking[::-1]) == (0, 0.0)
