"""
This module defines the heuristic motion planner for dynamic cluttered environments.

The planner builds an oriented tangent graph over the inflated obstacle discs: nodes are tangent points on a
circle together with the direction in which the circle is passed, edges are free tangent segments between circles
and free arcs along a circle. The shortest path to the target is searched separately on the left and on the right
of the straight start-target line, and the shorter candidate wins (a seeded coin flip breaks exact ties).

Dynamic obstacles are extrapolated linearly over the prediction horizon. Predicted discs that collide with the
robot's time-indexed position along the candidate path are united into obstacle belts, and the path is replanned
around the belts until no new collision risk appears. The final path is sampled equidistantly into a reference
trajectory for the tracker.

Classes:
    InfeasiblePlanError: Raised when no traversable path exists or the planning loop does not settle.
    DeadEndError: Raised when no reachable point exists within the perception region.
    InvalidPlanRequestError: Raised when a plan request violates its invariants.
    TangentGraph: oriented tangent graph over a set of forbidden discs.
    ObstacleBelt, PlanRequest, ReferenceTrajectory, PlannerSettings: planner data.

Functions:
    plan_static, smooth_path, fallback_target, predict_obstacle_positions, plan_with_dynamics, reference_speed,
    extract_reference, relative_prediction_error
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import networkx as nx
import numpy as np

from robot_navigation_simulation.geometry import (
    TOLERANCE,
    Arc,
    DegenerateInputError,
    Disc,
    ForbiddenRegionError,
    GeometricPath,
    Orientation,
    Segment,
    Vec2,
    angular_offset,
    arc_clearances,
    discs_to_arrays,
    heading_change,
    normalize_angle,
    path_disc_clearance,
    point_tangents,
    segment_clearances,
    self_intersects,
    tangent_lines,
    tangent_orientation,
)
from robot_navigation_simulation.tube_mpc import TubeParameters, tube_widths
from robot_navigation_simulation.world_simulation import (
    DynamicObstacleState,
    PerceivedObstacle,
    PerceptionSnapshot,
    RobotLimits,
    propagate_nominal,
    step_dynamic_obstacle,
)

logger = logging.getLogger(__name__)

SOURCE_LEFT = "source-left"
SOURCE_RIGHT = "source-right"
TARGET = "target"


class InfeasiblePlanError(Exception):
    """Exception raised when no traversable and safe path can be planned"""


class DeadEndError(Exception):
    """Exception raised when no point within the perception region can be reached"""


class InvalidPlanRequestError(Exception):
    """Exception raised when a plan request violates its invariants"""


@dataclass(frozen=True)
class PlannerSettings:
    """Caps and margins of the planner; all of them are recorded in scenario files."""

    iteration_cap: int = 10
    smoothing_cap: int = 10
    target_margin: float = 0.1
    boundary_samples: int = 72
    kink_tolerance: float = 1e-6
    start_clearance: float = 1e-6


class TangentGraph:
    """
    Oriented tangent graph over forbidden discs.

    Discs contained in another disc are dropped. Start and target points are attached per query and removed again
    afterwards, so one graph serves many queries over the same discs.
    """

    def __init__(self, discs: Sequence[Disc]):
        self.discs = _outer_discs(discs)
        self.centers, self.radii = discs_to_arrays(self.discs)
        self.graph = nx.DiGraph()
        self.circle_nodes: dict[tuple[int, Orientation], list[tuple]] = {}
        self._build()

    def _key(self, index: int, orientation: Orientation, angle: float) -> tuple:
        return (index, orientation.value, round(normalize_angle(angle), 12))

    def _add_node(self, index: int, orientation: Orientation, point: Vec2) -> tuple[tuple, bool]:
        angle = self.discs[index].angle_of(point)
        key = self._key(index, orientation, angle)
        if key in self.graph:
            return key, False
        self.graph.add_node(key, disc=index, orientation=orientation, angle=angle)
        self.circle_nodes.setdefault((index, orientation), []).append(key)
        return key, True

    def segment_is_free(self, start: Vec2, end: Vec2) -> bool:
        return bool(np.all(segment_clearances(start, end, self.centers, self.radii) >= -TOLERANCE))

    def arc_is_free(self, arc: Arc, own_index: int) -> bool:
        clearances = arc_clearances(arc, self.centers, self.radii)
        clearances[own_index] = np.inf
        return bool(np.all(clearances >= -TOLERANCE))

    def _build(self) -> None:
        for i, first in enumerate(self.discs):
            for j in range(i + 1, len(self.discs)):
                second = self.discs[j]
                try:
                    tangents = tangent_lines(first, second)
                except DegenerateInputError:
                    continue
                for touch_first, touch_second in tangents:
                    if touch_first.distance_to(touch_second) <= TOLERANCE:
                        continue
                    if not self.segment_is_free(touch_first, touch_second):
                        continue
                    direction = touch_second - touch_first
                    turn_first = tangent_orientation(first, touch_first, direction)
                    turn_second = tangent_orientation(second, touch_second, direction)
                    forward_from, _ = self._add_node(i, turn_first, touch_first)
                    forward_to, _ = self._add_node(j, turn_second, touch_second)
                    self._add_segment(forward_from, forward_to, Segment(touch_first, touch_second))
                    backward_from, _ = self._add_node(j, turn_second.flipped(), touch_second)
                    backward_to, _ = self._add_node(i, turn_first.flipped(), touch_first)
                    self._add_segment(backward_from, backward_to, Segment(touch_second, touch_first))
        for (index, orientation), keys in self.circle_nodes.items():
            ordered = sorted(keys, key=lambda key: orientation.sign * self.graph.nodes[key]["angle"])
            if len(ordered) < 2:
                continue
            for current, following in zip(ordered, ordered[1:] + ordered[:1]):
                self._add_arc(index, orientation, current, following)

    def _add_segment(self, start_key, end_key, segment: Segment) -> None:
        self.graph.add_edge(start_key, end_key, weight=segment.length, element=segment)

    def _add_arc(self, index: int, orientation: Orientation, start_key, end_key) -> None:
        if start_key == end_key:
            return
        arc = Arc(
            self.discs[index],
            self.graph.nodes[start_key]["angle"],
            self.graph.nodes[end_key]["angle"],
            orientation,
        )
        if self.arc_is_free(arc, index):
            self.graph.add_edge(start_key, end_key, weight=arc.length, element=arc)

    def _attach(self, index: int, orientation: Orientation, point: Vec2, temporary: list) -> tuple:
        """Adds a terminal tangent node and links it to its neighbors on the same circle."""
        key, created = self._add_node(index, orientation, point)
        if not created:
            return key
        temporary.append(key)
        angle = self.graph.nodes[key]["angle"]
        others = [other for other in self.circle_nodes[(index, orientation)] if other != key]
        if others:
            successor = min(others, key=lambda o: angular_offset(angle, self.graph.nodes[o]["angle"], orientation))
            predecessor = min(others, key=lambda o: angular_offset(self.graph.nodes[o]["angle"], angle, orientation))
            self._add_arc(index, orientation, predecessor, key)
            self._add_arc(index, orientation, key, successor)
        return key

    def shortest_path(self, start: Vec2, target: Vec2, rng: np.random.Generator | None = None) -> GeometricPath | None:
        """
        Shortest tangent path from start to target, or None when the target cannot be reached.

        The left candidate leaves the start turning clockwise around its first obstacle, the right candidate
        counter-clockwise; a free straight line belongs to both.

        Raises:
            ForbiddenRegionError: if the start or the target lies in a disc.
        """
        for point in (start, target):
            for disc in self.discs:
                if disc.blocks(point):
                    raise ForbiddenRegionError(
                        "Point (" + str(point.x) + ", " + str(point.y) + ") lies in a forbidden disc at ("
                        + str(disc.center.x) + ", " + str(disc.center.y) + ")"
                    )
        if start.distance_to(target) <= TOLERANCE:
            return GeometricPath((), origin=start)

        temporary: list = []
        self.graph.add_nodes_from((SOURCE_LEFT, SOURCE_RIGHT, TARGET))
        try:
            if self.segment_is_free(start, target):
                direct = Segment(start, target)
                for source in (SOURCE_LEFT, SOURCE_RIGHT):
                    self._add_segment(source, TARGET, direct)
            for index, disc in enumerate(self.discs):
                for _, touch in point_tangents(start, disc):
                    if not self.segment_is_free(start, touch):
                        continue
                    orientation = tangent_orientation(disc, touch, touch - start)
                    key = self._attach(index, orientation, touch, temporary)
                    source = SOURCE_LEFT if orientation is Orientation.CW else SOURCE_RIGHT
                    self._add_segment(source, key, Segment(start, touch))
                for _, touch in point_tangents(target, disc):
                    if not self.segment_is_free(touch, target):
                        continue
                    key = self._attach(index, tangent_orientation(disc, touch, target - touch), touch, temporary)
                    self._add_segment(key, TARGET, Segment(touch, target))

            candidates = []
            for source in (SOURCE_LEFT, SOURCE_RIGHT):
                try:
                    length, nodes = nx.single_source_dijkstra(self.graph, source, TARGET, weight="weight")
                except nx.NetworkXNoPath:
                    continue
                candidates.append((length, self._assemble(nodes, start)))
        finally:
            for key in temporary:
                node = self.graph.nodes[key]
                self.circle_nodes[(node["disc"], node["orientation"])].remove(key)
            self.graph.remove_nodes_from([SOURCE_LEFT, SOURCE_RIGHT, TARGET] + temporary)

        if not candidates:
            return None
        if len(candidates) == 2 and abs(candidates[0][0] - candidates[1][0]) <= TOLERANCE:
            pick = int(rng.random() < 0.5) if rng is not None else 0
            return candidates[pick][1]
        return min(candidates, key=lambda candidate: candidate[0])[1]

    def _assemble(self, nodes: list, start: Vec2) -> GeometricPath:
        elements = []
        for current, following in zip(nodes, nodes[1:]):
            element = self.graph.edges[current, following]["element"]
            if element.length <= TOLERANCE:
                continue
            previous = elements[-1] if elements else None
            if (
                isinstance(element, Arc)
                and isinstance(previous, Arc)
                and previous.disc == element.disc
                and previous.orientation is element.orientation
            ):
                elements[-1] = Arc(element.disc, previous.start_angle, element.end_angle, element.orientation)
            else:
                elements.append(element)
        return GeometricPath(tuple(elements), origin=start)


def _outer_discs(discs: Sequence[Disc]) -> list[Disc]:
    """Drops duplicates and discs that lie inside another disc."""
    kept: list[Disc] = []
    for index, disc in enumerate(discs):
        contained = False
        for other_index, other in enumerate(discs):
            if other_index == index:
                continue
            gap = disc.center.distance_to(other.center) + disc.radius - other.radius
            if gap < -TOLERANCE or (abs(gap) <= TOLERANCE and (disc.radius < other.radius or other_index < index)):
                contained = True
                break
        if not contained:
            kept.append(disc)
    return kept


def reference_speed(limits: RobotLimits) -> float:
    """The higher of half the maximum velocity and the midpoint of the admissible velocity interval."""
    return max(limits.v_max / 2.0, (limits.v_min + limits.v_max) / 2.0)


def path_defect(path: GeometricPath, kink_tolerance: float = 1e-6) -> str | None:
    """Describes why a path needs smoothing, or returns None for a smooth path."""
    crossing, point = self_intersects(path)
    if crossing:
        return "self-intersection at (" + str(point.x) + ", " + str(point.y) + ")"
    for index, (previous, following) in enumerate(zip(path.elements, path.elements[1:])):
        if heading_change(previous.end_heading, following.start_heading) > kink_tolerance:
            return "kink between elements " + str(index) + " and " + str(index + 1)
    return None


def _is_clear(path: GeometricPath, obstacles: Sequence[Disc]) -> bool:
    return all(path_disc_clearance(path, disc) >= -TOLERANCE for disc in obstacles)


def smooth_path(
    path: GeometricPath,
    obstacles: Sequence[Disc],
    rng: np.random.Generator | None = None,
    cap: int = 10,
    kink_tolerance: float = 1e-6,
) -> GeometricPath:
    """
    Removes self-intersections and kinks by drawing tangents across the outer obstacles.

    A defective path is replaced by the shortest tangent route over the discs it wraps or touches; when that route
    is not clear of every obstacle, the route over all obstacles is used. Smooth paths are returned unchanged.

    Raises:
        InfeasiblePlanError: if no replacement exists or defects remain after `cap` replacements.
    """
    current = path
    for _ in range(cap):
        defect = path_defect(current, kink_tolerance)
        if defect is None:
            return current
        logger.debug("Smoothing path of length %.3f: %s", current.length, defect)
        wrapped = list(current.discs)
        wrapped += [disc for disc in obstacles if path_disc_clearance(current, disc) <= 1e-6 and disc not in wrapped]
        replacement = TangentGraph(wrapped).shortest_path(current.start, current.end, rng)
        if replacement is None or not _is_clear(replacement, obstacles):
            replacement = TangentGraph(obstacles).shortest_path(current.start, current.end, rng)
        if replacement is None:
            raise InfeasiblePlanError("No smooth replacement exists for a path with " + defect)
        current = replacement
    defect = path_defect(current, kink_tolerance)
    if defect is not None:
        raise InfeasiblePlanError("Smoothing did not converge within " + str(cap) + " iterations: " + defect)
    return current


def plan_static(
    snapshot: PerceptionSnapshot,
    start: Vec2,
    target: Vec2,
    safety_radius: float,
    rng: np.random.Generator | None = None,
) -> GeometricPath:
    """
    Shortest safe path around the perceived static obstacles, each inflated to a disc of radius `safety_radius`.

    Raises:
        ForbiddenRegionError: if the start lies within an inflated disc.
        InfeasiblePlanError: if the target is blocked or cannot be reached.
    """
    discs = [Disc(disc.center, safety_radius) for disc in snapshot.visible_static]
    for disc in discs:
        if disc.blocks(start):
            raise ForbiddenRegionError("Start lies within " + str(safety_radius) + " m of a static obstacle")
        if disc.blocks(target):
            raise InfeasiblePlanError("Target lies within " + str(safety_radius) + " m of a static obstacle")
    path = TangentGraph(discs).shortest_path(start, target, rng)
    if path is None:
        raise InfeasiblePlanError("No traversable path to (" + str(target.x) + ", " + str(target.y) + ")")
    return smooth_path(path, discs, rng)


def _fallback_candidates(
    start: Vec2, target: Vec2, discs: Sequence[Disc], limit: float, samples: int
) -> list[Vec2]:
    candidates = [target]
    offset = target - start
    if offset.norm() > limit:
        candidates.append(start + offset.unit() * limit)
    for disc in discs:
        if disc.blocks(target):
            direction = target - disc.center
            if direction.norm() <= TOLERANCE:
                direction = start - disc.center
            candidates.append(disc.center + direction.unit() * (disc.radius + 1e-6))
    angles = np.linspace(0.0, 2.0 * math.pi, samples, endpoint=False)
    for disc in discs:
        candidates += [disc.center + Vec2.from_polar(angle, disc.radius + 1e-6) for angle in angles]
    candidates += [start + Vec2.from_polar(angle, limit) for angle in angles]
    free = [
        point
        for point in candidates
        if point.distance_to(start) <= limit + TOLERANCE
        and point.distance_to(start) > TOLERANCE
        and not any(disc.blocks(point) for disc in discs)
    ]
    return sorted(free, key=lambda point: point.distance_to(target))


def _stays_within(path: GeometricPath, center: Vec2, radius: float, spacing: float = 0.05) -> bool:
    points = path.sample_points(spacing)
    return bool(np.all(np.hypot(points[:, 0] - center.x, points[:, 1] - center.y) <= radius + TOLERANCE))


def _reachable_fallback(
    start: Vec2,
    target: Vec2,
    discs: Sequence[Disc],
    perception_radius: float,
    settings: PlannerSettings,
    graph: TangentGraph | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[Vec2, GeometricPath]:
    graph = graph or TangentGraph(discs)
    limit = perception_radius - settings.target_margin
    for candidate in _fallback_candidates(start, target, discs, limit, settings.boundary_samples):
        path = graph.shortest_path(start, candidate, rng)
        if path is not None and _stays_within(path, start, perception_radius):
            return candidate, path
    raise DeadEndError(
        "No reachable point within " + str(limit) + " m of (" + str(start.x) + ", " + str(start.y) + ")"
    )


def fallback_target(
    snapshot: PerceptionSnapshot,
    target: Vec2,
    safety_radius: float = 0.6,
    discs: Sequence[Disc] | None = None,
    settings: PlannerSettings | None = None,
) -> Vec2:
    """
    Reachable point inside the perception region that is as close as possible to an unreachable target.

    Candidates are the target itself, the point where the start-target ray leaves the perception region (minus the
    target margin), the projection of the target onto every disc that contains it, and points sampled on every disc
    boundary and on the perception boundary. They are tried in order of distance to the target, and a candidate
    only counts as reachable when its path stays inside the perception region.

    Raises:
        DeadEndError: if none of the candidates can be reached.
    """
    settings = settings or PlannerSettings()
    if discs is None:
        discs = [Disc(disc.center, safety_radius) for disc in snapshot.visible_static]
    start = snapshot.robot_state.position
    point, _ = _reachable_fallback(start, target, discs, snapshot.perception_radius, settings)
    return point


def predict_obstacle_positions(
    visible_dynamic: Sequence[PerceivedObstacle],
    horizon: int,
    sampling_time: float,
    safety_radius: float = 0.6,
    tube: TubeParameters | None = None,
) -> list[list[Disc]]:
    """
    Linear extrapolation of every perceived dynamic obstacle over steps 1..horizon.

    The disc at step k has radius safety_radius plus the obstacle tube width of step k.
    """
    tube = tube or TubeParameters()
    widths = tube_widths(horizon, tube.obstacle_bound, tube.obstacle_damping)
    predictions = []
    for obstacle in visible_dynamic:
        predictions.append(
            [
                Disc(obstacle.position + obstacle.velocity * (k * sampling_time), safety_radius + widths[k - 1])
                for k in range(1, horizon + 1)
            ]
        )
    return predictions


def relative_prediction_error(obstacle: DynamicObstacleState, horizon: int, sampling_time: float) -> float:
    """
    Error of the linear extrapolation after `horizon` steps against the simulated obstacle motion.

    The error is divided by the obstacle's initial distance to its attraction point.
    """
    truth = obstacle
    for _ in range(horizon):
        truth = step_dynamic_obstacle(truth, sampling_time)
    predicted = obstacle.position + obstacle.velocity * (horizon * sampling_time)
    return predicted.distance_to(truth.position) / obstacle.position.distance_to(obstacle.attraction)


@dataclass(frozen=True)
class ObstacleBelt:
    """Union of predicted discs with collision risk, treated as one compound forbidden region."""

    member_discs: tuple[Disc, ...]
    obstacles: tuple[int, ...] = ()

    def contains(self, point: Vec2) -> bool:
        return any(disc.blocks(point) for disc in self.member_discs)

    def is_connected(self) -> bool:
        graph = nx.Graph()
        graph.add_nodes_from(range(len(self.member_discs)))
        for i, first in enumerate(self.member_discs):
            for j in range(i + 1, len(self.member_discs)):
                if first.overlaps(self.member_discs[j]):
                    graph.add_edge(i, j)
        return nx.is_connected(graph) if len(self.member_discs) else True


def _bridged(discs: list[Disc]) -> list[Disc]:
    """Inserts evenly spaced discs between consecutive discs that do not overlap."""
    result = discs[:1]
    for first, second in zip(discs, discs[1:]):
        gap = first.center.distance_to(second.center)
        radius = min(first.radius, second.radius)
        if gap >= first.radius + second.radius:
            count = int(math.ceil(gap / radius))
            step = (second.center - first.center) * (1.0 / count)
            result += [Disc(first.center + step * i, radius) for i in range(1, count)]
        result.append(second)
    return result


def build_belts(predictions: list[list[Disc]], risky: dict[int, set[int]]) -> list[ObstacleBelt]:
    """
    Forms one belt per risky obstacle from its predicted discs between the first and the last risky step, then
    merges belts that overlap.
    """
    per_obstacle = {}
    for obstacle, steps in risky.items():
        if steps:
            members = predictions[obstacle][min(steps) - 1 : max(steps)]
            per_obstacle[obstacle] = _bridged(members)
    overlap = nx.Graph()
    overlap.add_nodes_from(per_obstacle)
    keys = sorted(per_obstacle)
    for i, first in enumerate(keys):
        for second in keys[i + 1 :]:
            if any(a.overlaps(b) for a in per_obstacle[first] for b in per_obstacle[second]):
                overlap.add_edge(first, second)
    belts = []
    for component in sorted(nx.connected_components(overlap), key=min):
        members = tuple(disc for obstacle in sorted(component) for disc in per_obstacle[obstacle])
        belts.append(ObstacleBelt(members, tuple(sorted(component))))
    return belts


def collision_risks(
    path: GeometricPath, predictions: list[list[Disc]], speed: float, sampling_time: float
) -> dict[int, set[int]]:
    """
    Predicted steps of each obstacle that collide with the robot's timed positions along the path.

    The robot position at step k is compared with the obstacle's predicted discs at steps k-1, k and k+1.
    """
    horizon = len(predictions[0]) if predictions else 0
    positions = [path.point_at(k * speed * sampling_time) for k in range(1, horizon + 1)]
    risky: dict[int, set[int]] = {}
    for obstacle, discs in enumerate(predictions):
        for k, position in enumerate(positions, start=1):
            for step in (k - 1, k, k + 1):
                if 1 <= step <= horizon and discs[step - 1].signed_distance(position) < -TOLERANCE:
                    risky.setdefault(obstacle, set()).add(step)
    return risky


@dataclass
class PlanRequest:
    """Everything one planning call needs; radii are read from the snapshot."""

    snapshot: PerceptionSnapshot
    final_target: Vec2
    horizon: int = 5
    sampling_time: float = 0.1
    safety_radius: float = 0.6
    limits: RobotLimits = field(default_factory=RobotLimits)
    tube: TubeParameters = field(default_factory=TubeParameters)
    settings: PlannerSettings = field(default_factory=PlannerSettings)

    def validate(self) -> None:
        if self.horizon < 1:
            raise InvalidPlanRequestError("Prediction horizon must be at least 1, got: " + str(self.horizon))
        if self.sampling_time <= 0.0:
            raise InvalidPlanRequestError("Sampling time must be positive, got: " + str(self.sampling_time))
        minimum = self.snapshot.robot_radius + self.snapshot.obstacle_radius
        if self.safety_radius < minimum:
            raise InvalidPlanRequestError(
                "Safety radius " + str(self.safety_radius) + " is below robot plus obstacle radius " + str(minimum)
            )


@dataclass
class ReferenceTrajectory:
    """
    Reference poses for steps kappa+1..kappa+N and reference inputs for kappa..kappa+N-1.

    initial_pose is the reference at kappa itself; propagating it with the inputs reproduces the states.
    unresolved_obstacles lists the dynamic obstacles whose predicted discs the path still crosses because those discs
    already contained the robot when planning.
    """

    states: np.ndarray
    inputs: np.ndarray
    initial_pose: np.ndarray
    source_path: GeometricPath
    time_step: int = 0
    speed: float = 0.5
    goal: Vec2 | None = None
    shifts: int = 0
    unresolved_obstacles: tuple[int, ...] = ()

    @property
    def horizon(self) -> int:
        return len(self.states)

    @property
    def exhausted(self) -> bool:
        return self.shifts >= self.horizon

    def shifted(self) -> ReferenceTrajectory:
        """Reference for the next time step when no new plan is available: the last state is held."""
        states = np.vstack((self.states[1:], self.states[-1:]))
        inputs = np.vstack((self.inputs[1:], np.zeros((1, 2))))
        return ReferenceTrajectory(
            states, inputs, self.states[0].copy(), self.source_path, self.time_step + 1, self.speed, self.goal,
            self.shifts + 1, self.unresolved_obstacles,
        )

    def consistency_error(self, sampling_time: float) -> float:
        """Largest position gap between consecutive reference states and the kinematics under the reference inputs."""
        pose, worst = self.initial_pose, 0.0
        for state, control in zip(self.states, self.inputs):
            worst = max(worst, float(np.linalg.norm(propagate_nominal(pose, control, sampling_time)[:2] - state[:2])))
            pose = state
        return worst


def extract_reference(
    path: GeometricPath, horizon: int, sampling_time: float, speed: float, time_step: int = 0
) -> ReferenceTrajectory:
    """
    Samples the path every speed * sampling_time meters and derives inputs that reach each sample exactly.

    The first reference heading is the path tangent at the start. Each input is found from the chord to the next
    sample in the body frame: a forward offset a and a lateral offset b give v = a / c and omega = b / (a c).
    Later headings follow from these inputs rather than from the path tangent, so the states satisfy the kinematics
    exactly; on an arc they trail the tangent by at most half the angle turned per sample.
    """
    spacing = speed * sampling_time
    pose = np.array([path.start.x, path.start.y, path.heading_at(0.0)])
    initial = pose.copy()
    states, inputs = [], []
    for k in range(1, horizon + 1):
        point = path.point_at(k * spacing)
        chord = point.as_array() - pose[:2]
        cos_t, sin_t = math.cos(pose[2]), math.sin(pose[2])
        forward = chord[0] * cos_t + chord[1] * sin_t
        lateral = -chord[0] * sin_t + chord[1] * cos_t
        if forward <= 1e-12:
            control = np.zeros(2)
        else:
            control = np.array([forward / sampling_time, lateral / (forward * sampling_time)])
        pose = propagate_nominal(pose, control, sampling_time)
        states.append(pose)
        inputs.append(control)
    return ReferenceTrajectory(np.array(states), np.array(inputs), initial, path, time_step, speed, path.end)


def temporary_target(start: Vec2, target: Vec2, perception_radius: float, margin: float) -> Vec2:
    """The final target when it lies inside the perception region, otherwise its projection onto the region."""
    limit = perception_radius - margin
    offset = target - start
    if offset.norm() <= limit:
        return target
    return start + offset.unit() * limit


def _shrink_to_start(disc: Disc, start: Vec2, clearance: float) -> Disc | None:
    """Shrinks a disc that contains the start so the start lies just outside it."""
    if not disc.blocks(start):
        return disc
    radius = disc.center.distance_to(start) - clearance
    return Disc(disc.center, radius) if radius > TOLERANCE else None


def _plan_path(
    start: Vec2,
    goal: Vec2,
    forbidden: list[Disc],
    perception_radius: float,
    settings: PlannerSettings,
    rng: np.random.Generator | None,
) -> GeometricPath:
    graph = TangentGraph(forbidden)
    path = None
    if not any(disc.blocks(goal) for disc in forbidden):
        path = graph.shortest_path(start, goal, rng)
    if path is None:
        fallback, path = _reachable_fallback(start, goal, forbidden, perception_radius, settings, graph, rng)
        logger.debug("Temporary target replaced by (%.3f, %.3f)", fallback.x, fallback.y)
    return smooth_path(path, forbidden, rng, settings.smoothing_cap, settings.kink_tolerance)


def plan_with_dynamics(
    request: PlanRequest, rng: np.random.Generator | None = None, debug_records: list | None = None
) -> ReferenceTrajectory:
    """
    Plans around static obstacles and obstacle belts of the dynamic ones, then extracts the reference.

    Static discs get radius safety_radius plus the robot tube width at the end of the horizon; the predicted disc
    of a dynamic obstacle at step k gets safety_radius plus both tube widths of step k. Discs that already contain
    the robot are shrunk (static) or left out (predicted) so the robot can always leave them.

    Parameters
    ----------
    request : PlanRequest
        Snapshot, final target and parameters.
    rng : np.random.Generator, optional
        Source of the coin flips between equally long sides.
    debug_records : list, optional
        When given, one record per iteration (candidate path, belts) is appended for plotting.

    Raises
    ------
    InfeasiblePlanError
        If the loop does not settle within the iteration cap or no safe path exists.
    DeadEndError
        If no point in the perception region is reachable.
    """
    request.validate()
    snapshot, settings = request.snapshot, request.settings
    start = snapshot.robot_state.position
    horizon, c = request.horizon, request.sampling_time
    robot_widths = tube_widths(horizon, request.tube.robot_bound, request.tube.robot_damping)

    statics = []
    for disc in snapshot.visible_static:
        shrunk = _shrink_to_start(Disc(disc.center, request.safety_radius + robot_widths[-1]), start,
                                  settings.start_clearance)
        if shrunk is not None:
            statics.append(shrunk)
    predictions = [
        [disc.inflated(robot_widths[k]) for k, disc in enumerate(discs)]
        for discs in predict_obstacle_positions(snapshot.visible_dynamic, horizon, c, request.safety_radius,
                                                request.tube)
    ]
    goal = temporary_target(start, request.final_target, snapshot.perception_radius, settings.target_margin)
    speed = reference_speed(request.limits)

    risky: dict[int, set[int]] = {}
    for iteration in range(settings.iteration_cap):
        belts = build_belts(predictions, risky)
        forbidden = statics + [disc for belt in belts for disc in belt.member_discs if not disc.blocks(start)]
        try:
            path = _plan_path(start, goal, forbidden, snapshot.perception_radius, settings, rng)
        except ForbiddenRegionError as error:
            raise InfeasiblePlanError(str(error)) from error
        found = collision_risks(path, predictions, speed, c)
        if debug_records is not None:
            debug_records.append(
                {
                    "iteration": iteration,
                    "path": path,
                    "belts": belts,
                    "risky": {obstacle: sorted(steps) for obstacle, steps in found.items()},
                }
            )
        new_steps = {obstacle: steps - risky.get(obstacle, set()) for obstacle, steps in found.items()}
        if not any(new_steps.values()):
            reference = extract_reference(path, horizon, c, speed, snapshot.time_step)
            reference.unresolved_obstacles = tuple(sorted(obstacle for obstacle, steps in found.items() if steps))
            if reference.unresolved_obstacles:
                logger.warning(
                    "Path at step %d crosses predicted discs of obstacles %s that contain the robot",
                    snapshot.time_step, list(reference.unresolved_obstacles),
                )
            return reference
        for obstacle, steps in new_steps.items():
            risky.setdefault(obstacle, set()).update(steps)
        logger.debug("Iteration %d: belts for obstacles %s", iteration, sorted(risky))
    raise InfeasiblePlanError("Planning loop did not settle within " + str(settings.iteration_cap) + " iterations")
