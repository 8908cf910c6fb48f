"""
This module defines the exact 2D primitives the motion planner builds on.

Obstacles are circles, and every path the planner produces is a chain of straight segments and circular arcs
that are tangent to those circles. Arcs are stored by their angles instead of sampled polylines so that path
lengths stay exact; sampling only happens when reference points are extracted from a path.

All geometric tolerances are absolute and equal to TOLERANCE (1e-9 m). A point at exactly the radius of a disc is
treated as touching the disc, so it is rejected wherever a point has to lie outside.

Classes:
    NonFiniteCoordinateError: Raised when a coordinate is NaN or infinite.
    InvalidDiscError: Raised when a disc has a non-positive radius.
    DegenerateInputError: Raised when two discs coincide.
    ForbiddenRegionError: Raised when a start or target point lies in a forbidden disc.
    InvalidPathError: Raised when consecutive path elements are not connected.
    Vec2, Disc, Segment, Arc, GeometricPath: immutable geometric values.

Functions:
    tangent_lines(first, second): all common tangents of two circles.
    point_tangents(point, disc): both tangents from an exterior point to a circle.
    path_length(path): exact length of a connected path.
    path_disc_clearance(path, disc): signed clearance between a path and a disc.
    self_intersects(path): first crossing between two non-adjacent elements of a path.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

TOLERANCE = 1e-9
ADJACENT_EXCLUSION = 1e-6
TWO_PI = 2.0 * math.pi


class NonFiniteCoordinateError(Exception):
    """Exception raised when a coordinate is NaN or infinite"""


class InvalidDiscError(Exception):
    """Exception raised when a disc has a non-positive or non-finite radius"""


class DegenerateInputError(Exception):
    """Exception raised when two discs coincide so their tangents are undefined"""


class ForbiddenRegionError(Exception):
    """Exception raised when a start or target point lies inside or on a forbidden disc"""


class InvalidPathError(Exception):
    """Exception raised when a path is not connected or contains a degenerate element"""


def normalize_angle(angle: float) -> float:
    """Wraps an angle to the interval (-pi, pi]."""
    wrapped = math.remainder(angle, TWO_PI)
    if wrapped <= -math.pi:
        wrapped += TWO_PI
    return wrapped


@dataclass(frozen=True)
class Vec2:
    """Position or direction in the plane, in meters."""

    x: float
    y: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise NonFiniteCoordinateError(
                "Vector components must be finite, got: (" + str(self.x) + ", " + str(self.y) + ")"
            )

    @classmethod
    def from_polar(cls, angle: float, radius: float = 1.0) -> Vec2:
        return cls(radius * math.cos(angle), radius * math.sin(angle))

    @classmethod
    def from_array(cls, values) -> Vec2:
        return cls(float(values[0]), float(values[1]))

    def __add__(self, other: Vec2) -> Vec2:
        return Vec2(self.x + other.x, self.y + other.y)

    def __sub__(self, other: Vec2) -> Vec2:
        return Vec2(self.x - other.x, self.y - other.y)

    def __mul__(self, scale: float) -> Vec2:
        return Vec2(self.x * scale, self.y * scale)

    __rmul__ = __mul__

    def __neg__(self) -> Vec2:
        return Vec2(-self.x, -self.y)

    def dot(self, other: Vec2) -> float:
        return self.x * other.x + self.y * other.y

    def cross(self, other: Vec2) -> float:
        return self.x * other.y - self.y * other.x

    def norm(self) -> float:
        return math.hypot(self.x, self.y)

    def distance_to(self, other: Vec2) -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def angle(self) -> float:
        return math.atan2(self.y, self.x)

    def unit(self) -> Vec2:
        length = self.norm()
        if length <= 0.0:
            raise DegenerateInputError("Cannot normalize a zero-length vector!")
        return Vec2(self.x / length, self.y / length)

    def rotated(self, angle: float) -> Vec2:
        cos_a, sin_a = math.cos(angle), math.sin(angle)
        return Vec2(cos_a * self.x - sin_a * self.y, sin_a * self.x + cos_a * self.y)

    def perpendicular(self) -> Vec2:
        """Returns the vector rotated by +90 degrees."""
        return Vec2(-self.y, self.x)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Disc:
    """Circular region, used both for raw obstacles and for inflated forbidden areas."""

    center: Vec2
    radius: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "radius", float(self.radius))
        if not math.isfinite(self.radius) or self.radius <= 0.0:
            raise InvalidDiscError("Disc radius must be positive, got: " + str(self.radius))

    def inflated(self, margin: float) -> Disc:
        return Disc(self.center, self.radius + margin)

    def point_at(self, angle: float) -> Vec2:
        return self.center + Vec2.from_polar(angle, self.radius)

    def angle_of(self, point: Vec2) -> float:
        return (point - self.center).angle()

    def signed_distance(self, point: Vec2) -> float:
        """Distance from the point to the circle, negative inside the disc."""
        return self.center.distance_to(point) - self.radius

    def blocks(self, point: Vec2) -> bool:
        """True when the point lies inside the disc or on its boundary."""
        return self.signed_distance(point) <= TOLERANCE

    def overlaps(self, other: Disc) -> bool:
        return self.center.distance_to(other.center) < self.radius + other.radius


class Orientation(Enum):
    """Direction in which an arc is traversed."""

    CW = "cw"
    CCW = "ccw"

    @property
    def sign(self) -> float:
        return 1.0 if self is Orientation.CCW else -1.0

    def flipped(self) -> Orientation:
        return Orientation.CW if self is Orientation.CCW else Orientation.CCW


def tangent_orientation(disc: Disc, touch: Vec2, direction: Vec2) -> Orientation:
    """Orientation in which a path moving along `direction` at `touch` circles around the disc."""
    return Orientation.CCW if (touch - disc.center).cross(direction) > 0.0 else Orientation.CW


@dataclass(frozen=True)
class Segment:
    """Straight path element."""

    start: Vec2
    end: Vec2

    def __post_init__(self) -> None:
        if self.start.distance_to(self.end) <= TOLERANCE:
            raise InvalidPathError("Segment endpoints must be distinct, got: " + str(self.start))

    @property
    def kind(self) -> str:
        return "segment"

    @property
    def start_point(self) -> Vec2:
        return self.start

    @property
    def end_point(self) -> Vec2:
        return self.end

    @property
    def length(self) -> float:
        return self.start.distance_to(self.end)

    @property
    def direction(self) -> Vec2:
        return (self.end - self.start).unit()

    @property
    def start_heading(self) -> float:
        return (self.end - self.start).angle()

    @property
    def end_heading(self) -> float:
        return self.start_heading

    def point_at(self, distance: float) -> Vec2:
        fraction = min(max(distance / self.length, 0.0), 1.0)
        return self.start + (self.end - self.start) * fraction

    def heading_at(self, _distance: float) -> float:
        return self.start_heading

    def transformed(self, rotation: float, translation: Vec2) -> Segment:
        return Segment(self.start.rotated(rotation) + translation, self.end.rotated(rotation) + translation)


@dataclass(frozen=True)
class Arc:
    """
    Circular path element on the boundary of a disc.

    The angles are normalized to (-pi, pi]. The swept angle is measured from start_angle to end_angle in the
    direction of the orientation; a start equal to the end describes an empty arc unless full_circle is set.
    """

    disc: Disc
    start_angle: float
    end_angle: float
    orientation: Orientation
    full_circle: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "start_angle", normalize_angle(self.start_angle))
        object.__setattr__(self, "end_angle", normalize_angle(self.end_angle))

    @property
    def kind(self) -> str:
        return "arc"

    @property
    def sweep(self) -> float:
        if self.full_circle:
            return TWO_PI
        return angular_offset(self.start_angle, self.end_angle, self.orientation)

    @property
    def length(self) -> float:
        return self.disc.radius * self.sweep

    @property
    def start_point(self) -> Vec2:
        return self.disc.point_at(self.start_angle)

    @property
    def end_point(self) -> Vec2:
        return self.disc.point_at(self.end_angle)

    @property
    def start_heading(self) -> float:
        return normalize_angle(self.start_angle + self.orientation.sign * math.pi / 2.0)

    @property
    def end_heading(self) -> float:
        return normalize_angle(self.end_angle + self.orientation.sign * math.pi / 2.0)

    def angle_at(self, distance: float) -> float:
        swept = min(max(distance / self.disc.radius, 0.0), self.sweep)
        return self.start_angle + self.orientation.sign * swept

    def point_at(self, distance: float) -> Vec2:
        return self.disc.point_at(self.angle_at(distance))

    def heading_at(self, distance: float) -> float:
        return normalize_angle(self.angle_at(distance) + self.orientation.sign * math.pi / 2.0)

    def contains_angle(self, angle: float, tolerance: float = TOLERANCE) -> bool:
        if self.full_circle:
            return True
        offset = angular_offset(self.start_angle, angle, self.orientation)
        slack = tolerance / self.disc.radius
        return offset <= self.sweep + slack or offset >= TWO_PI - slack

    def transformed(self, rotation: float, translation: Vec2) -> Arc:
        disc = Disc(self.disc.center.rotated(rotation) + translation, self.disc.radius)
        return Arc(disc, self.start_angle + rotation, self.end_angle + rotation, self.orientation, self.full_circle)


PathElement = Segment | Arc


def angular_offset(start: float, end: float, orientation: Orientation) -> float:
    """Angle in [0, 2*pi) swept when moving from `start` to `end` in the given orientation."""
    delta = (end - start) if orientation is Orientation.CCW else (start - end)
    offset = delta % TWO_PI
    if offset >= TWO_PI - 1e-12:
        return 0.0
    return offset


@dataclass(frozen=True)
class GeometricPath:
    """
    Ordered chain of segments and arcs.

    An empty path is allowed when the start already equals the target; `origin` then tells where the path is.
    """

    elements: tuple[PathElement, ...]
    origin: Vec2 | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "elements", tuple(self.elements))
        if not self.elements and self.origin is None:
            raise InvalidPathError("An empty path needs an origin!")

    @property
    def start(self) -> Vec2:
        return self.elements[0].start_point if self.elements else self.origin

    @property
    def end(self) -> Vec2:
        return self.elements[-1].end_point if self.elements else self.origin

    @property
    def length(self) -> float:
        return float(sum(element.length for element in self.elements))

    @property
    def discs(self) -> list[Disc]:
        return [element.disc for element in self.elements if isinstance(element, Arc)]

    def is_connected(self) -> bool:
        for previous, following in zip(self.elements, self.elements[1:]):
            if previous.end_point.distance_to(following.start_point) > TOLERANCE:
                return False
        return True

    def validate(self) -> None:
        for index, (previous, following) in enumerate(zip(self.elements, self.elements[1:])):
            gap = previous.end_point.distance_to(following.start_point)
            if gap > TOLERANCE:
                raise InvalidPathError(
                    "Path elements " + str(index) + " and " + str(index + 1) + " are " + str(gap) + " m apart!"
                )

    def _locate(self, distance: float) -> tuple[PathElement, float]:
        cumulative = np.cumsum([element.length for element in self.elements])
        distance = min(max(distance, 0.0), float(cumulative[-1]))
        index = min(bisect.bisect_left(cumulative, distance), len(self.elements) - 1)
        offset = distance - (float(cumulative[index - 1]) if index > 0 else 0.0)
        return self.elements[index], offset

    def point_at(self, distance: float) -> Vec2:
        """Point at the given arc length, clamped to the path."""
        if not self.elements:
            return self.origin
        element, offset = self._locate(distance)
        return element.point_at(offset)

    def heading_at(self, distance: float) -> float:
        if not self.elements:
            return 0.0
        element, offset = self._locate(distance)
        return element.heading_at(offset)

    def sample_points(self, spacing: float) -> np.ndarray:
        """Points every `spacing` meters along the path, both ends included, as an (n, 2) array."""
        total = self.length
        count = max(int(math.ceil(total / spacing)), 1)
        return np.array([self.point_at(total * i / count).as_array() for i in range(count + 1)])

    def transformed(self, rotation: float, translation: Vec2) -> GeometricPath:
        origin = None if self.origin is None else self.origin.rotated(rotation) + translation
        return GeometricPath(tuple(element.transformed(rotation, translation) for element in self.elements), origin)


def tangent_lines(first: Disc, second: Disc) -> list[tuple[Vec2, Vec2]]:
    """
    Returns all common tangent segments of two circles.

    Each tangent is returned as (touch point on `first`, touch point on `second`). Disjoint discs have four
    tangents, externally touching discs three (the two internal tangents collapse onto the touch point),
    overlapping discs two, and nested discs none.

    Args:
        first: The disc where the tangents start.
        second: The disc where the tangents end.

    Returns:
        A list of touch point pairs: external tangents first, then internal ones.

    Raises:
        DegenerateInputError: If both discs coincide.
    """
    offset = second.center - first.center
    distance = offset.norm()
    if distance <= TOLERANCE and abs(first.radius - second.radius) <= TOLERANCE:
        raise DegenerateInputError("Coinciding discs have no well-defined common tangents!")
    if distance <= abs(first.radius - second.radius) + TOLERANCE:
        return []

    unit = offset * (1.0 / distance)
    tangents = []
    for second_sign in (1.0, -1.0):
        # external tangents keep both discs on the same side of the line, internal ones separate them
        if second_sign < 0.0:
            gap = distance - (first.radius + second.radius)
            if gap < -TOLERANCE:
                continue
            if gap <= TOLERANCE:
                touch = first.center + unit * first.radius
                tangents.append((touch, touch))
                continue
        ratio = (first.radius - second_sign * second.radius) / distance
        height = math.sqrt(max(0.0, 1.0 - ratio * ratio))
        for side in (1.0, -1.0):
            normal = Vec2(ratio * unit.x - side * height * unit.y, ratio * unit.y + side * height * unit.x)
            tangents.append(
                (first.center + normal * first.radius, second.center + normal * (second_sign * second.radius))
            )
    return tangents


def point_tangents(point: Vec2, disc: Disc) -> list[tuple[Vec2, Vec2]]:
    """
    Returns both tangent segments from an exterior point to a circle.

    The first tangent touches the circle counter-clockwise from the center-to-point direction, the second one
    clockwise from it.

    Raises:
        ForbiddenRegionError: If the point lies inside the disc or on its boundary.
    """
    offset = point - disc.center
    distance = offset.norm()
    if distance - disc.radius <= TOLERANCE:
        raise ForbiddenRegionError(
            "Point (" + str(point.x) + ", " + str(point.y) + ") lies in a forbidden disc of radius " + str(disc.radius)
        )
    base = offset.angle()
    spread = math.acos(disc.radius / distance)
    return [(point, disc.point_at(base + spread)), (point, disc.point_at(base - spread))]


def path_length(path: GeometricPath) -> float:
    """
    Returns the exact length of a path: segment lengths plus radius times swept angle of every arc.

    Raises:
        InvalidPathError: If consecutive elements do not share their endpoints.
    """
    path.validate()
    return path.length


def _point_segment_distance(point: Vec2, segment: Segment) -> float:
    direction = segment.end - segment.start
    fraction = (point - segment.start).dot(direction) / direction.dot(direction)
    fraction = min(max(fraction, 0.0), 1.0)
    return point.distance_to(segment.start + direction * fraction)


def _point_arc_distance(point: Vec2, arc: Arc) -> float:
    offset = point - arc.disc.center
    radial = offset.norm()
    if radial <= TOLERANCE:
        return arc.disc.radius
    if arc.contains_angle(offset.angle(), tolerance=0.0):
        return abs(radial - arc.disc.radius)
    return min(point.distance_to(arc.start_point), point.distance_to(arc.end_point))


def element_clearance(element: PathElement, disc: Disc) -> float:
    if isinstance(element, Segment):
        return _point_segment_distance(disc.center, element) - disc.radius
    return _point_arc_distance(disc.center, element) - disc.radius


def path_disc_clearance(path: GeometricPath, disc: Disc) -> float:
    """
    Minimum over the path of the distance to the disc center minus the disc radius.

    A negative value is the penetration depth of the path into the disc.
    """
    if not path.elements:
        return disc.signed_distance(path.origin)
    return min(element_clearance(element, disc) for element in path.elements)


def segment_clearances(start: Vec2, end: Vec2, centers: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Clearance of one segment against many discs, given as (n, 2) centers and (n,) radii."""
    if len(radii) == 0:
        return np.empty(0)
    origin = start.as_array()
    direction = end.as_array() - origin
    squared = float(direction @ direction)
    relative = centers - origin
    if squared <= 0.0:
        return np.linalg.norm(relative, axis=1) - radii
    fraction = np.clip(relative @ direction / squared, 0.0, 1.0)
    closest = origin + fraction[:, None] * direction
    return np.linalg.norm(centers - closest, axis=1) - radii


def arc_clearances(arc: Arc, centers: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Clearance of one arc against many discs, given as (n, 2) centers and (n,) radii."""
    if len(radii) == 0:
        return np.empty(0)
    relative = centers - arc.disc.center.as_array()
    radial = np.linalg.norm(relative, axis=1)
    angles = np.arctan2(relative[:, 1], relative[:, 0])
    delta = (angles - arc.start_angle) if arc.orientation is Orientation.CCW else (arc.start_angle - angles)
    offsets = np.mod(delta, TWO_PI)
    inside = (offsets <= arc.sweep) | arc.full_circle
    start, end = arc.start_point.as_array(), arc.end_point.as_array()
    to_ends = np.minimum(np.linalg.norm(centers - start, axis=1), np.linalg.norm(centers - end, axis=1))
    distance = np.where(inside, np.abs(radial - arc.disc.radius), to_ends)
    distance = np.where(radial <= TOLERANCE, arc.disc.radius, distance)
    return distance - radii


def _segment_segment_points(first: Segment, second: Segment) -> list[Vec2]:
    direction_a = first.end - first.start
    direction_b = second.end - second.start
    between = second.start - first.start
    denominator = direction_a.cross(direction_b)
    length_a, length_b = direction_a.norm(), direction_b.norm()
    if abs(denominator) <= 1e-12 * length_a * length_b:
        if abs(between.cross(direction_a)) > TOLERANCE * length_a:
            return []
        # collinear: intersect the parameter intervals along the first segment
        squared = direction_a.dot(direction_a)
        low = between.dot(direction_a) / squared
        high = (second.end - first.start).dot(direction_a) / squared
        low, high = min(low, high), max(low, high)
        low, high = max(low, 0.0), min(high, 1.0)
        if low > high + TOLERANCE / length_a:
            return []
        return [first.start + direction_a * low, first.start + direction_a * high]
    fraction_a = between.cross(direction_b) / denominator
    fraction_b = between.cross(direction_a) / denominator
    slack_a, slack_b = TOLERANCE / length_a, TOLERANCE / length_b
    if -slack_a <= fraction_a <= 1.0 + slack_a and -slack_b <= fraction_b <= 1.0 + slack_b:
        return [first.start + direction_a * fraction_a]
    return []


def _segment_arc_points(segment: Segment, arc: Arc) -> list[Vec2]:
    direction = segment.end - segment.start
    relative = segment.start - arc.disc.center
    quadratic = direction.dot(direction)
    linear = 2.0 * direction.dot(relative)
    constant = relative.dot(relative) - arc.disc.radius**2
    discriminant = linear * linear - 4.0 * quadratic * constant
    if discriminant < -TOLERANCE * quadratic:
        return []
    root = math.sqrt(max(discriminant, 0.0))
    slack = TOLERANCE / math.sqrt(quadratic)
    points = []
    for fraction in ((-linear - root) / (2.0 * quadratic), (-linear + root) / (2.0 * quadratic)):
        if -slack <= fraction <= 1.0 + slack:
            point = segment.start + direction * fraction
            if arc.contains_angle(arc.disc.angle_of(point)):
                points.append(point)
    return points


def _arc_arc_points(first: Arc, second: Arc) -> list[Vec2]:
    offset = second.disc.center - first.disc.center
    distance = offset.norm()
    radius_a, radius_b = first.disc.radius, second.disc.radius
    if distance <= TOLERANCE and abs(radius_a - radius_b) <= TOLERANCE:
        # same circle: the arcs meet when an endpoint of one lies on the other
        candidates = [
            second.start_point if first.contains_angle(second.start_angle) else None,
            second.end_point if first.contains_angle(second.end_angle) else None,
            first.start_point if second.contains_angle(first.start_angle) else None,
            first.end_point if second.contains_angle(first.end_angle) else None,
        ]
        return [point for point in candidates if point is not None]
    if distance <= TOLERANCE or distance > radius_a + radius_b + TOLERANCE:
        return []
    if distance < abs(radius_a - radius_b) - TOLERANCE:
        return []
    along = (radius_a**2 - radius_b**2 + distance**2) / (2.0 * distance)
    height = math.sqrt(max(radius_a**2 - along**2, 0.0))
    unit = offset * (1.0 / distance)
    base = first.disc.center + unit * along
    points = []
    for side in (1.0, -1.0):
        point = base + unit.perpendicular() * (side * height)
        if first.contains_angle(first.disc.angle_of(point)) and second.contains_angle(second.disc.angle_of(point)):
            points.append(point)
    return points


def element_intersections(first: PathElement, second: PathElement) -> list[Vec2]:
    """All intersection points of two path elements (both endpoints of a collinear overlap)."""
    if isinstance(first, Segment) and isinstance(second, Segment):
        return _segment_segment_points(first, second)
    if isinstance(first, Segment):
        return _segment_arc_points(first, second)
    if isinstance(second, Segment):
        return _segment_arc_points(second, first)
    return _arc_arc_points(first, second)


def self_intersects(path: GeometricPath) -> tuple[bool, Vec2 | None]:
    """
    Checks whether any two non-adjacent elements of the path cross each other.

    Adjacent elements only share their common endpoint; any other point they have in common also counts as a
    self-intersection.

    Returns:
        (True, first intersection point in path order) or (False, None).
    """
    elements = path.elements
    for i, first in enumerate(elements):
        for j in range(i + 1, len(elements)):
            points = element_intersections(first, elements[j])
            if j == i + 1:
                shared = first.end_point
                points = [point for point in points if point.distance_to(shared) > ADJACENT_EXCLUSION]
            if points:
                return True, points[0]
    return False, None


def heading_change(first: float, second: float) -> float:
    """Absolute heading difference in [0, pi]."""
    return abs(normalize_angle(second - first))


def discs_to_arrays(discs: Sequence[Disc]) -> tuple[np.ndarray, np.ndarray]:
    """Splits discs into an (n, 2) array of centers and an (n,) array of radii."""
    centers = np.array([[disc.center.x, disc.center.y] for disc in discs]).reshape(-1, 2)
    radii = np.array([disc.radius for disc in discs], dtype=float)
    return centers, radii
