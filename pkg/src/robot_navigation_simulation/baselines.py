"""
Comparison methods: horizon-limited RRT* (HL-RRT*) and horizon-based artificial potential fields (APF).

HL-RRT* grows an RRT* tree inside the perception horizon with samples biased toward the horizon boundary and the
target. The tree grows without collision checks; only the final candidate path is checked against the obstacles at
their currently perceived positions. When no node closer to the target than the robot is found, no path is
returned and the robot holds its position.

APF steers the robot along the sum of an attraction toward the target and repulsions from obstacles, where every
dynamic obstacle is represented by the closest of its positions extrapolated over a short horizon.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from robot_navigation_simulation.geometry import TOLERANCE, GeometricPath, Segment, Vec2, normalize_angle
from robot_navigation_simulation.world_simulation import PerceptionSnapshot, RobotLimits

logger = logging.getLogger(__name__)


class InvalidApfParamsError(Exception):
    """Error raised when potential-field parameters are not positive or a preset is unknown"""


@dataclass(frozen=True)
class HlrrtParams:
    """
    HL-RRT* settings.

    horizon_radius None means the perception radius. In iteration budget mode a decision budget of b seconds allows
    b / seconds_per_sample samples.
    """

    step_size: float = 0.5
    neighbor_radius: float = 1.5
    goal_bias: float = 0.1
    horizon_bias: float = 0.3
    horizon_radius: float | None = None
    candidate_checks: int = 5
    seconds_per_sample: float = 1e-4
    max_samples: int = 5000
    lookahead: float = 0.5


class RrtTree:
    """RRT* tree with cost-to-come bookkeeping; rewiring propagates cost changes to the whole subtree."""

    def __init__(self, root: Vec2, horizon_radius: float = 5.0, goal_bias: float = 0.1):
        self.horizon_radius = horizon_radius
        self.goal_bias = goal_bias
        self._positions = np.zeros((64, 2))
        self._positions[0] = root.as_array()
        self.parents = [-1]
        self.costs = [0.0]
        self.children: list[list[int]] = [[]]

    def __len__(self) -> int:
        return len(self.parents)

    @property
    def positions(self) -> np.ndarray:
        return self._positions[: len(self)]

    def nearest(self, point: np.ndarray) -> int:
        return int(np.argmin(np.sum((self.positions - point) ** 2, axis=1)))

    def near(self, point: np.ndarray, radius: float) -> np.ndarray:
        return np.flatnonzero(np.sum((self.positions - point) ** 2, axis=1) <= radius * radius)

    def add(self, position: np.ndarray, parent: int) -> int:
        index = len(self)
        if index == len(self._positions):
            self._positions = np.vstack((self._positions, np.zeros_like(self._positions)))
        self._positions[index] = position
        self.parents.append(parent)
        self.costs.append(self.costs[parent] + float(np.linalg.norm(position - self._positions[parent])))
        self.children.append([])
        self.children[parent].append(index)
        return index

    def choose_parent(self, position: np.ndarray, candidates: np.ndarray) -> int:
        costs = [self.costs[i] + float(np.linalg.norm(position - self._positions[i])) for i in candidates]
        return int(candidates[int(np.argmin(costs))])

    def rewire(self, index: int, candidates: np.ndarray) -> None:
        """Makes `index` the parent of every candidate it reaches more cheaply."""
        for other in candidates:
            other = int(other)
            if other in (index, self.parents[index]):
                continue
            cost = self.costs[index] + float(np.linalg.norm(self._positions[other] - self._positions[index]))
            if cost < self.costs[other] - 1e-12:
                self.children[self.parents[other]].remove(other)
                self.parents[other] = index
                self.children[index].append(other)
                self._shift_costs(other, cost - self.costs[other])

    def _shift_costs(self, index: int, delta: float) -> None:
        stack = [index]
        while stack:
            node = stack.pop()
            self.costs[node] += delta
            stack.extend(self.children[node])

    def path_to(self, index: int) -> list[np.ndarray]:
        nodes = []
        while index != -1:
            nodes.append(self._positions[index].copy())
            index = self.parents[index]
        return nodes[::-1]

    def is_consistent(self, tolerance: float = 1e-9) -> bool:
        """Every parent chain reaches the root and every cost equals parent cost plus edge length."""
        for index in range(1, len(self)):
            parent = self.parents[index]
            edge = float(np.linalg.norm(self._positions[index] - self._positions[parent]))
            if abs(self.costs[index] - self.costs[parent] - edge) > tolerance:
                return False
            seen, node = set(), index
            while node != -1:
                if node in seen:
                    return False
                seen.add(node)
                node = self.parents[node]
        return True


def _sample(start: np.ndarray, goal: np.ndarray, horizon: float, params: HlrrtParams, rng) -> np.ndarray:
    draws = rng.random(3)
    if draws[0] < params.goal_bias:
        return goal
    angle = 2.0 * math.pi * draws[1]
    if draws[0] < params.goal_bias + params.horizon_bias:
        distance = horizon
    else:
        distance = horizon * math.sqrt(draws[2])
    return start + distance * np.array([math.cos(angle), math.sin(angle)])


def grow_tree(
    snapshot: PerceptionSnapshot,
    target: Vec2,
    params: HlrrtParams,
    rng: np.random.Generator,
    sample_limit: int,
    deadline: float | None = None,
) -> RrtTree:
    """Grows the horizon-limited tree from the robot position; nodes outside the arena are discarded."""
    start = snapshot.robot_state.position
    horizon = params.horizon_radius or snapshot.perception_radius
    tree = RrtTree(start, horizon, params.goal_bias)
    origin = start.as_array()
    offset = target.as_array() - origin
    distance = float(np.linalg.norm(offset))
    goal = target.as_array() if distance <= horizon else origin + offset / distance * horizon
    width, height = snapshot.arena
    for _ in range(sample_limit):
        if deadline is not None and time.perf_counter() >= deadline:
            break
        sample = _sample(origin, goal, horizon, params, rng)
        nearest = tree.nearest(sample)
        step = sample - tree.positions[nearest]
        length = float(np.linalg.norm(step))
        if length <= TOLERANCE:
            continue
        position = tree.positions[nearest] + step * min(1.0, params.step_size / length)
        if not (0.0 <= position[0] <= width and 0.0 <= position[1] <= height):
            continue
        candidates = tree.near(position, params.neighbor_radius)
        if nearest not in candidates:
            candidates = np.append(candidates, nearest)
        index = tree.add(position, tree.choose_parent(position, candidates))
        tree.rewire(index, candidates)
    return tree


def _path_is_free(points: list[np.ndarray], centers: np.ndarray, radii: np.ndarray) -> bool:
    for first, second in zip(points, points[1:]):
        direction = second - first
        squared = float(direction @ direction)
        if squared <= 0.0 or len(radii) == 0:
            continue
        fraction = np.clip((centers - first) @ direction / squared, 0.0, 1.0)
        closest = first + fraction[:, None] * direction
        if np.any(np.linalg.norm(centers - closest, axis=1) <= radii):
            return False
    return True


def hlrrt_plan(
    snapshot: PerceptionSnapshot,
    target: Vec2,
    budget: float | None,
    rng: np.random.Generator,
    params: HlrrtParams | None = None,
    budget_mode: str = "iterations",
) -> GeometricPath | None:
    """
    One HL-RRT* decision: grow the tree within the budget and return the collision-checked path to the node
    closest to the target.

    Returns None when the budget is zero, when no node is closer to the target than the robot, or when none of the
    closest candidate paths is free of the currently perceived obstacles.
    """
    params = params or HlrrtParams()
    if budget is not None and budget <= 0.0:
        return None
    deadline = None
    if budget is None:
        sample_limit = params.max_samples
    elif budget_mode == "iterations":
        sample_limit = int(budget / params.seconds_per_sample)
    else:
        sample_limit, deadline = params.max_samples, time.perf_counter() + budget
    tree = grow_tree(snapshot, target, params, rng, sample_limit, deadline)

    start = snapshot.robot_state.position
    goal = target.as_array()
    distances = np.linalg.norm(tree.positions - goal, axis=1)
    threshold = start.distance_to(target) - 1e-9
    improving = [int(i) for i in np.argsort(distances, kind="stable") if distances[i] < threshold]
    clearance = snapshot.robot_radius
    centers = [disc.center.as_array() for disc in snapshot.visible_static]
    radii = [disc.radius + clearance for disc in snapshot.visible_static]
    centers += [obstacle.position.as_array() for obstacle in snapshot.visible_dynamic]
    radii += [snapshot.obstacle_radius + clearance] * len(snapshot.visible_dynamic)
    centers_array = np.array(centers, dtype=float).reshape(-1, 2)
    radii_array = np.array(radii, dtype=float)
    for index in improving[: params.candidate_checks]:
        points = tree.path_to(index)
        if _path_is_free(points, centers_array, radii_array):
            segments = [
                Segment(Vec2.from_array(first), Vec2.from_array(second))
                for first, second in zip(points, points[1:])
                if np.linalg.norm(second - first) > TOLERANCE
            ]
            return GeometricPath(tuple(segments), origin=start)
    logger.debug("HL-RRT* found no improving collision-free node among %d nodes", len(tree))
    return None


@dataclass(frozen=True)
class ApfParams:
    """
    Potential-field gains, influence radius in meters and extrapolation horizon in steps.

    speed_gain converts the force magnitude into the commanded speed before clamping.
    """

    attraction_gain: float = 1.0
    repulsion_gain: float = 1.0
    influence_radius: float = 2.0
    horizon_steps: int = 5
    speed_gain: float = 1.0

    def validate(self) -> None:
        if self.attraction_gain <= 0.0 or self.repulsion_gain <= 0.0:
            raise InvalidApfParamsError(
                "Gains must be positive, got: " + str(self.attraction_gain) + ", " + str(self.repulsion_gain)
            )
        if self.speed_gain <= 0.0:
            raise InvalidApfParamsError("Speed gain must be positive, got: " + str(self.speed_gain))
        if self.influence_radius <= 0.0:
            raise InvalidApfParamsError("Influence radius must be positive, got: " + str(self.influence_radius))
        if self.horizon_steps < 0:
            raise InvalidApfParamsError("Horizon must be nonnegative, got: " + str(self.horizon_steps))


APF_PRESETS = {
    # repulsion outweighs attraction within about 3.5 m of any obstacle, and the saturated speed keeps the robot
    # circling wherever the two balance
    "wide-influence": ApfParams(
        attraction_gain=0.5, repulsion_gain=50.0, influence_radius=6.0, horizon_steps=10, speed_gain=50.0
    ),
    "retuned": ApfParams(attraction_gain=1.0, repulsion_gain=0.4, influence_radius=1.2, horizon_steps=5),
}


def apf_preset(name: str) -> ApfParams:
    try:
        return APF_PRESETS[name]
    except KeyError as error:
        raise InvalidApfParamsError("Unknown APF preset: " + name) from error


def apf_force(position: np.ndarray, target: np.ndarray, obstacles: list[np.ndarray], params: ApfParams):
    """Unit attraction toward the target minus FIRAS repulsion from every obstacle inside the influence radius."""
    offset = target - position
    distance = float(np.linalg.norm(offset))
    force = params.attraction_gain * offset / distance if distance > TOLERANCE else np.zeros(2)
    for obstacle in obstacles:
        toward = obstacle - position
        gap = float(np.linalg.norm(toward))
        if TOLERANCE < gap < params.influence_radius:
            force -= params.repulsion_gain * (1.0 / gap - 1.0 / params.influence_radius) / gap**2 * toward / gap
    return force


def apf_step(
    snapshot: PerceptionSnapshot, target: Vec2, params: ApfParams, limits: RobotLimits | None = None
) -> tuple[float, float]:
    """
    One APF decision.

    The commanded heading is the force direction; omega turns toward it within one sampling time and is clamped,
    v equals speed_gain times the force magnitude, clamped to the velocity bounds. A force below 1e-6 stops the robot.
    """
    limits = limits or RobotLimits()
    state = snapshot.robot_state
    position = state.pose[:2]
    c = snapshot.sampling_time
    obstacles = [disc.center.as_array() for disc in snapshot.visible_static]
    for obstacle in snapshot.visible_dynamic:
        steps = np.arange(params.horizon_steps + 1)[:, None] * c
        extrapolated = obstacle.position.as_array() + steps * obstacle.velocity.as_array()
        obstacles.append(extrapolated[int(np.argmin(np.linalg.norm(extrapolated - position, axis=1)))])
    force = apf_force(position, target.as_array(), obstacles, params)
    magnitude = float(np.linalg.norm(force))
    if magnitude < 1e-6:
        return 0.0, 0.0
    heading_error = normalize_angle(math.atan2(force[1], force[0]) - state.theta)
    v, omega, _ = limits.clamp(params.speed_gain * magnitude, heading_error / c)
    return v, omega


def follow_path(path: GeometricPath, snapshot: PerceptionSnapshot, limits: RobotLimits, lookahead: float = 0.5):
    """
    Pure-pursuit style input toward the point `lookahead` meters along the path.

    The speed is reduced with the cosine of the heading error and never exceeds what reaches the path end within
    one sampling time.
    """
    state = snapshot.robot_state
    c = snapshot.sampling_time
    if path.length <= TOLERANCE:
        return 0.0, 0.0
    aim = path.point_at(min(lookahead, path.length)) - state.position
    if aim.norm() <= TOLERANCE:
        return 0.0, 0.0
    heading_error = normalize_angle(aim.angle() - state.theta)
    speed = min(limits.v_max, path.length / c) * max(math.cos(heading_error), 0.0)
    v, omega, _ = limits.clamp(speed, heading_error / c)
    return v, omega
