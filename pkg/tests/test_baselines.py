import math
import unittest

import numpy as np
import pytest

from robot_navigation_simulation.baselines import (
    APF_PRESETS,
    ApfParams,
    HlrrtParams,
    InvalidApfParamsError,
    RrtTree,
    apf_force,
    apf_preset,
    apf_step,
    follow_path,
    grow_tree,
    hlrrt_plan,
)
from robot_navigation_simulation.geometry import Disc, GeometricPath, Segment, Vec2, path_disc_clearance
from robot_navigation_simulation.world_simulation import (
    PerceivedObstacle,
    PerceptionSnapshot,
    RobotLimits,
    RobotState,
)


def _snapshot(statics=(), dynamics=(), position=(2.0, 2.0), theta=0.0, perception_radius=5.0):
    robot = RobotState(position[0], position[1], theta)
    return PerceptionSnapshot(tuple(statics), tuple(dynamics), robot, perception_radius)


def _line(start, end):
    return GeometricPath((Segment(Vec2(*start), Vec2(*end)),))


class TestRrtTree(unittest.TestCase):
    def setUp(self):
        self.tree = RrtTree(Vec2(0.0, 0.0))
        self.tree.add(np.array([2.0, 0.0]), 0)
        self.tree.add(np.array([2.0, 2.0]), 1)
        self.tree.add(np.array([3.0, 3.0]), 2)

    def test_costs_accumulate(self):
        self.assertEqual(len(self.tree), 4)
        self.assertAlmostEqual(self.tree.costs[3], 4.0 + math.sqrt(2.0))
        self.assertTrue(self.tree.is_consistent())

    def test_rewire_shifts_subtree(self):
        shortcut = self.tree.add(np.array([1.0, 1.0]), 0)
        self.tree.rewire(shortcut, np.array([2]))
        self.assertEqual(self.tree.parents[2], shortcut)
        self.assertEqual(self.tree.children[1], [])
        self.assertAlmostEqual(self.tree.costs[3], 3.0 * math.sqrt(2.0))
        self.assertTrue(self.tree.is_consistent())
        np.testing.assert_allclose(self.tree.path_to(3), [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])

    def test_choose_parent_minimizes_cost(self):
        self.tree.add(np.array([1.0, 1.0]), 0)
        self.assertEqual(self.tree.choose_parent(np.array([3.0, 0.0]), np.array([1, 4])), 1)

    def test_stale_cost_is_inconsistent(self):
        self.tree.costs[2] += 1.0
        self.assertFalse(self.tree.is_consistent())

    def test_growth_beyond_initial_capacity(self):
        for k in range(100):
            self.tree.add(np.array([0.01 * k, 0.0]), len(self.tree) - 1)
        self.assertEqual(len(self.tree), 104)
        self.assertTrue(self.tree.is_consistent())


class TestHlrrt(unittest.TestCase):
    def test_grown_tree_stays_in_horizon(self):
        snapshot = _snapshot(statics=(Disc(Vec2(4.0, 2.0), 0.3),), position=(1.0, 2.0))
        tree = grow_tree(snapshot, Vec2(10.0, 2.0), HlrrtParams(), np.random.default_rng(3), 400)
        self.assertTrue(tree.is_consistent())
        offsets = np.linalg.norm(tree.positions - np.array([1.0, 2.0]), axis=1)
        self.assertTrue(np.all(offsets <= 5.0 + 1e-9))
        self.assertTrue(np.all(tree.positions >= 0.0) and np.all(tree.positions <= 14.0))

    def test_zero_budget_returns_no_path(self):
        self.assertIsNone(hlrrt_plan(_snapshot(), Vec2(10.0, 2.0), 0.0, np.random.default_rng(0)))

    def test_free_space_path_approaches_target(self):
        target = Vec2(10.0, 2.0)
        path = hlrrt_plan(_snapshot(), target, 0.15, np.random.default_rng(0))
        self.assertIsNotNone(path)
        self.assertEqual(path.start, Vec2(2.0, 2.0))
        self.assertLess(path.end.distance_to(target), 8.0)
        self.assertLessEqual(path.start.distance_to(path.end), 5.0 + 1e-9)

    def test_robot_on_target_has_no_improving_node(self):
        self.assertIsNone(hlrrt_plan(_snapshot(), Vec2(2.0, 2.0), 0.15, np.random.default_rng(0)))

    def test_returned_paths_avoid_perceived_obstacles(self):
        static = Disc(Vec2(4.0, 3.0), 0.3)
        dynamic = PerceivedObstacle(0, Vec2(5.0, 1.2), Vec2(0.0, -0.2))
        snapshot = _snapshot(statics=(static,), dynamics=(dynamic,))
        found = 0
        for seed in range(5):
            path = hlrrt_plan(snapshot, Vec2(10.0, 2.0), 0.15, np.random.default_rng(seed))
            if path is None:
                continue
            found += 1
            self.assertGreater(path_disc_clearance(path, static.inflated(0.2)), 0.0)
            self.assertGreater(path_disc_clearance(path, Disc(dynamic.position, 0.5)), 0.0)
        self.assertGreater(found, 0)

    def test_same_seed_same_path(self):
        paths = [hlrrt_plan(_snapshot(), Vec2(10.0, 5.0), 0.05, np.random.default_rng(9)) for _ in range(2)]
        np.testing.assert_array_equal(paths[0].sample_points(0.1), paths[1].sample_points(0.1))


class TestApf(unittest.TestCase):
    def test_attraction_is_unit_vector(self):
        np.testing.assert_allclose(apf_force(np.zeros(2), np.array([3.0, 4.0]), [], ApfParams()), [0.6, 0.8])

    def test_repulsion_from_obstacle_behind(self):
        force = apf_force(np.zeros(2), np.array([5.0, 0.0]), [np.array([-1.0, 0.0])], ApfParams())
        np.testing.assert_allclose(force, [1.5, 0.0])

    def test_mirrored_obstacles_cancel_sideways(self):
        obstacles = [np.array([1.0, 1.0]), np.array([1.0, -1.0])]
        force = apf_force(np.zeros(2), np.array([5.0, 0.0]), obstacles, ApfParams())
        self.assertAlmostEqual(force[1], 0.0)
        self.assertLess(force[0], 1.0)

    def test_obstacles_outside_influence_are_ignored(self):
        force = apf_force(np.zeros(2), np.array([5.0, 0.0]), [np.array([0.0, 2.5])], ApfParams())
        np.testing.assert_allclose(force, [1.0, 0.0])

    def test_step_toward_target(self):
        self.assertEqual(apf_step(_snapshot(), Vec2(7.0, 2.0), ApfParams()), (1.0, 0.0))
        v, omega = apf_step(_snapshot(theta=math.pi / 2.0), Vec2(7.0, 2.0), ApfParams())
        self.assertEqual(v, 1.0)
        self.assertEqual(omega, -1.5)

    def test_wide_influence_turns_back_from_distant_obstacle(self):
        snapshot = _snapshot(statics=(Disc(Vec2(5.0, 2.0), 0.3),))
        wide = apf_preset("wide-influence")
        force = apf_force(np.array([2.0, 2.0]), np.array([12.0, 2.0]), [np.array([5.0, 2.0])], wide)
        self.assertLess(force[0], 0.0)
        v, omega = apf_step(snapshot, Vec2(12.0, 2.0), wide)
        self.assertEqual(v, 1.0)
        self.assertEqual(abs(omega), 1.5)
        self.assertEqual(apf_step(snapshot, Vec2(12.0, 2.0), apf_preset("retuned"))[0], 1.0)

    def test_zero_force_stops(self):
        self.assertEqual(apf_step(_snapshot(), Vec2(2.0, 2.0), ApfParams()), (0.0, 0.0))

    def test_dynamic_obstacles_use_closest_extrapolation(self):
        moving = PerceivedObstacle(0, Vec2(3.5, 2.0), Vec2(-1.0, 0.0))
        standing = PerceivedObstacle(0, Vec2(3.0, 2.0), Vec2(0.0, 0.0))
        target = Vec2(2.0, 7.0)
        expected = apf_step(_snapshot(dynamics=(standing,)), target, ApfParams())
        self.assertEqual(apf_step(_snapshot(dynamics=(moving,)), target, ApfParams()), pytest.approx(expected))
        ignored = ApfParams(horizon_steps=0)
        at_rest = PerceivedObstacle(0, Vec2(3.5, 2.0), Vec2(0.0, 0.0))
        self.assertEqual(
            apf_step(_snapshot(dynamics=(moving,)), target, ignored),
            pytest.approx(apf_step(_snapshot(dynamics=(at_rest,)), target, ignored)),
        )

    def test_invalid_params(self):
        with self.assertRaises(InvalidApfParamsError):
            ApfParams(repulsion_gain=0.0).validate()
        with self.assertRaises(InvalidApfParamsError):
            ApfParams(influence_radius=-1.0).validate()
        with self.assertRaises(InvalidApfParamsError):
            ApfParams(horizon_steps=-1).validate()


def test_presets():
    assert apf_preset("retuned") == ApfParams(1.0, 0.4, 1.2, 5)
    assert apf_preset("retuned").speed_gain == 1.0
    assert apf_preset("wide-influence") is APF_PRESETS["wide-influence"]
    wide = apf_preset("wide-influence")
    assert wide.repulsion_gain > wide.attraction_gain
    assert wide.influence_radius > apf_preset("retuned").influence_radius
    assert wide.speed_gain > 1.0
    with pytest.raises(InvalidApfParamsError):
        ApfParams(speed_gain=0.0).validate()
    with pytest.raises(InvalidApfParamsError):
        apf_preset("aggressive")


def test_follow_straight_path():
    assert follow_path(_line((2.0, 2.0), (7.0, 2.0)), _snapshot(), RobotLimits()) == (1.0, 0.0)


def test_follow_path_slows_near_end():
    v, omega = follow_path(_line((2.0, 2.0), (2.05, 2.0)), _snapshot(), RobotLimits())
    assert v == pytest.approx(0.5)
    assert omega == pytest.approx(0.0)


def test_follow_path_behind_turns_in_place():
    v, omega = follow_path(_line((2.0, 2.0), (0.0, 2.0)), _snapshot(), RobotLimits())
    assert v == 0.0
    assert abs(omega) == 1.5


def test_follow_empty_path_holds():
    path = GeometricPath((), origin=Vec2(2.0, 2.0))
    assert follow_path(path, _snapshot(), RobotLimits()) == (0.0, 0.0)
