"""
Ground-truth world of the navigation experiments.

The world advances in discrete steps of the sampling time c. Dynamic obstacles oscillate around fixed attraction
points (a spring law integrated with the Runge-Kutta 3/8 rule), the robot follows unicycle kinematics disturbed by a
bounded position error, and the robot perceives its surroundings through a memoryless snapshot: static obstacles
exactly, dynamic obstacles with a bounded position error.

Raises:
    InvalidWorldConfigError: if a world configuration or velocity bound is not usable
    InvalidMultiplierError: if obstacle multipliers are non-positive or eta lies outside [0, 1]
    PropagationError: if an integration step produces a non-finite derivative
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from robot_navigation_simulation.geometry import Disc, Vec2, normalize_angle

logger = logging.getLogger(__name__)


class InvalidWorldConfigError(Exception):
    """Error raised when a world configuration violates its invariants"""


class InvalidMultiplierError(Exception):
    """Error raised when obstacle multipliers are non-positive or eta is out of range"""


class PropagationError(Exception):
    """Error raised when a propagation step becomes non-finite"""


@dataclass(frozen=True)
class RobotLimits:
    """Admissible inputs of the robot: linear velocity, angular velocity and the per-step slew bound."""

    v_min: float = 0.0
    v_max: float = 1.0
    omega_min: float = -1.5
    omega_max: float = 1.5
    u_smooth: float = 0.5

    def validate(self) -> None:
        if self.v_min > self.v_max or self.omega_min > self.omega_max:
            raise InvalidWorldConfigError(
                "Input bounds are inverted: v in [" + str(self.v_min) + ", " + str(self.v_max) + "], omega in ["
                + str(self.omega_min) + ", " + str(self.omega_max) + "]"
            )
        if self.u_smooth <= 0.0:
            raise InvalidWorldConfigError("Slew bound must be positive, got: " + str(self.u_smooth))

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.v_min, self.omega_min])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.v_max, self.omega_max])

    def clamp(self, v: float, omega: float) -> tuple[float, float, bool]:
        """Clamps an input to the box and reports whether it had to be changed."""
        clamped_v = min(max(v, self.v_min), self.v_max)
        clamped_omega = min(max(omega, self.omega_min), self.omega_max)
        return clamped_v, clamped_omega, (clamped_v != v or clamped_omega != omega)

    def velocity_component_bounds(self) -> tuple[tuple[float, float], tuple[float, float]]:
        """Bounds of the robot's x and y velocity components, symmetric around zero."""
        speed = max(abs(self.v_min), abs(self.v_max))
        return (-speed, speed), (-speed, speed)


@dataclass(frozen=True)
class RobotState:
    """Pose (x, y, theta) of the robot together with the input (v, omega) applied to reach it."""

    x: float
    y: float
    theta: float
    v: float = 0.0
    omega: float = 0.0
    time_step: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    @property
    def position(self) -> Vec2:
        return Vec2(self.x, self.y)

    @property
    def pose(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    @property
    def input(self) -> np.ndarray:
        return np.array([self.v, self.omega])


@dataclass(frozen=True)
class DynamicObstacleState:
    """Position, velocity and attraction point of a dynamic obstacle with its spring multipliers."""

    position: Vec2
    velocity: Vec2
    attraction: Vec2
    alpha: float
    beta: float

    def __post_init__(self) -> None:
        if not (self.alpha > 0.0 and self.beta > 0.0 and math.isfinite(self.alpha) and math.isfinite(self.beta)):
            raise InvalidMultiplierError(
                "Multipliers must be positive and finite, got: alpha=" + str(self.alpha) + ", beta=" + str(self.beta)
            )


@dataclass(frozen=True)
class WorldConfig:
    """
    Static description of one simulated world.

    The arena spans [0, arena_width] x [0, arena_height]. Static obstacles are given as discs, dynamic obstacles
    by their initial state; every dynamic obstacle has radius obstacle_radius.
    """

    arena_width: float = 14.0
    arena_height: float = 14.0
    static_obstacles: tuple[Disc, ...] = ()
    dynamic_obstacles: tuple[DynamicObstacleState, ...] = ()
    obstacle_radius: float = 0.3
    robot_radius: float = 0.2
    perception_radius: float = 5.0
    disturbance_bound: float = 0.01
    perception_error_bound: float = 0.02
    sampling_time: float = 0.1
    rng_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "static_obstacles", tuple(self.static_obstacles))
        object.__setattr__(self, "dynamic_obstacles", tuple(self.dynamic_obstacles))

    def validate(self) -> None:
        if self.arena_width <= 0.0 or self.arena_height <= 0.0:
            raise InvalidWorldConfigError(
                "Arena must have a positive size, got: " + str(self.arena_width) + " x " + str(self.arena_height)
            )
        if self.sampling_time <= 0.0:
            raise InvalidWorldConfigError("Sampling time must be positive, got: " + str(self.sampling_time))
        for name in ("obstacle_radius", "robot_radius", "perception_radius"):
            if getattr(self, name) <= 0.0:
                raise InvalidWorldConfigError(name + " must be positive, got: " + str(getattr(self, name)))
        for name in ("disturbance_bound", "perception_error_bound"):
            if getattr(self, name) < 0.0:
                raise InvalidWorldConfigError(name + " must be nonnegative, got: " + str(getattr(self, name)))

    @property
    def collision_distance(self) -> float:
        return self.robot_radius + self.obstacle_radius


@dataclass(frozen=True)
class PerceivedObstacle:
    """Dynamic obstacle as reported by perception: noisy position, exact velocity."""

    identifier: int
    position: Vec2
    velocity: Vec2


@dataclass(frozen=True)
class PerceptionSnapshot:
    """Everything the robot knows at one time step. No history is kept between snapshots."""

    visible_static: tuple[Disc, ...]
    visible_dynamic: tuple[PerceivedObstacle, ...]
    robot_state: RobotState
    perception_radius: float
    obstacle_radius: float = 0.3
    robot_radius: float = 0.2
    arena: tuple[float, float] = (14.0, 14.0)
    sampling_time: float = 0.1

    @property
    def time_step(self) -> int:
        return self.robot_state.time_step


def rk38_integrate(
    derivative: Callable[[float, np.ndarray | float], np.ndarray | float],
    value: np.ndarray | float,
    sampling_time: float,
    time: float = 0.0,
) -> np.ndarray | float:
    """
    Advances `value` by one step of the classical Runge-Kutta 3/8 rule.

    Parameters
    ----------
    derivative : callable
        f(t, y) returning the time derivative of y.
    value : float or np.ndarray
        State at `time`.
    sampling_time : float
        Step size c, must be positive.
    time : float
        Start time of the step.

    Raises
    ------
    PropagationError
        If the step size is not positive or any stage derivative is non-finite.
    """
    if not sampling_time > 0.0:
        raise PropagationError("Step size must be positive, got: " + str(sampling_time))
    step = sampling_time
    stage_1 = derivative(time, value)
    stage_2 = derivative(time + step / 3.0, value + step * stage_1 / 3.0)
    stage_3 = derivative(time + 2.0 * step / 3.0, value + step * (-stage_1 / 3.0 + stage_2))
    stage_4 = derivative(time + step, value + step * (stage_1 - stage_2 + stage_3))
    for stage in (stage_1, stage_2, stage_3, stage_4):
        if not np.all(np.isfinite(stage)):
            raise PropagationError("Non-finite derivative during integration at t=" + str(time))
    return value + step * (stage_1 + 3.0 * stage_2 + 3.0 * stage_3 + stage_4) / 8.0


def _spring(multiplier: float, attraction: float) -> Callable[[float, np.ndarray], np.ndarray]:
    def derivative(_time: float, state: np.ndarray) -> np.ndarray:
        return np.array([state[1], multiplier * (attraction - state[0])])

    return derivative


def step_dynamic_obstacle(state: DynamicObstacleState, sampling_time: float) -> DynamicObstacleState:
    """Advances one obstacle by one sampling time; each axis is a position/velocity spring around the attraction."""
    x_axis = rk38_integrate(
        _spring(state.alpha, state.attraction.x), np.array([state.position.x, state.velocity.x]), sampling_time
    )
    y_axis = rk38_integrate(
        _spring(state.beta, state.attraction.y), np.array([state.position.y, state.velocity.y]), sampling_time
    )
    return replace(state, position=Vec2(x_axis[0], y_axis[0]), velocity=Vec2(x_axis[1], y_axis[1]))


def compute_multipliers(
    obstacle: DynamicObstacleState,
    velocity_bounds: tuple[tuple[float, float], tuple[float, float]],
    eta: float,
) -> tuple[float, float]:
    """
    Spring multipliers that make an obstacle roughly as agile as the robot.

    alpha = 0.2 (1 + 4 eta) / (vx_max - vx_min + |x0 - x_att|), beta analogous in y.

    Raises:
        InvalidMultiplierError: if eta is outside [0, 1].
        InvalidWorldConfigError: if a velocity range is empty, which would make a denominator vanish.
    """
    if not 0.0 <= eta <= 1.0:
        raise InvalidMultiplierError("eta must lie in [0, 1], got: " + str(eta))
    (vx_min, vx_max), (vy_min, vy_max) = velocity_bounds
    if vx_max <= vx_min or vy_max <= vy_min:
        raise InvalidWorldConfigError("Velocity bounds must satisfy max > min, got: " + str(velocity_bounds))
    numerator = 0.2 * (1.0 + 4.0 * eta)
    alpha = numerator / (vx_max - vx_min + abs(obstacle.position.x - obstacle.attraction.x))
    beta = numerator / (vy_max - vy_min + abs(obstacle.position.y - obstacle.attraction.y))
    return alpha, beta


def propagate_nominal(pose: np.ndarray, control: np.ndarray, sampling_time: float) -> np.ndarray:
    """Disturbance-free unicycle update: the input applied at step k moves the pose from k to k+1."""
    x, y, theta = pose
    v, omega = control
    c = sampling_time
    return np.array(
        [
            x + c * (v * math.cos(theta) - c * omega * v * math.sin(theta)),
            y + c * (v * math.sin(theta) + c * omega * v * math.cos(theta)),
            normalize_angle(theta + c * omega),
        ]
    )


def propagate_nominal_batch(pose: np.ndarray, controls: np.ndarray, sampling_time: float) -> np.ndarray:
    """
    Rolls the nominal model out for many input sequences at once.

    `controls` has shape (m, n, 2); the result has shape (m, n, 3) and holds the poses at steps k+1..k+n.
    Headings are left unwrapped.
    """
    c = sampling_time
    count, length, _ = controls.shape
    states = np.empty((count, length, 3))
    x = np.full(count, pose[0], dtype=float)
    y = np.full(count, pose[1], dtype=float)
    theta = np.full(count, pose[2], dtype=float)
    for k in range(length):
        v, omega = controls[:, k, 0], controls[:, k, 1]
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        x = x + c * (v * cos_t - c * omega * v * sin_t)
        y = y + c * (v * sin_t + c * omega * v * cos_t)
        theta = theta + c * omega
        states[:, k, 0], states[:, k, 1], states[:, k, 2] = x, y, theta
    return states


def sample_in_disc(rng: np.random.Generator, radius: float, count: int) -> np.ndarray:
    """Uniform samples from the disc of the given radius around the origin, shape (count, 2)."""
    draws = rng.random((count, 2))
    distance = radius * np.sqrt(draws[:, 0])
    angle = 2.0 * math.pi * draws[:, 1]
    return np.column_stack((distance * np.cos(angle), distance * np.sin(angle)))


def step_robot_truth(
    state: RobotState,
    control: tuple[float, float],
    sampling_time: float,
    rng: np.random.Generator,
    disturbance_bound: float = 0.0,
) -> RobotState:
    """Nominal kinematic update followed by an additive position disturbance uniform on the disturbance disc."""
    nominal = propagate_nominal(state.pose, np.asarray(control, dtype=float), sampling_time)
    offset = sample_in_disc(rng, disturbance_bound, 1)[0]
    return RobotState(
        x=nominal[0] + offset[0],
        y=nominal[1] + offset[1],
        theta=nominal[2],
        v=float(control[0]),
        omega=float(control[1]),
        time_step=state.time_step + 1,
    )


class World:
    """
    Ground truth of a single simulation run.

    Disturbances and perception errors come from two independent streams spawned from the configured seed, so the
    same scenario presents identical random values to every controller.
    """

    def __init__(self, config: WorldConfig, robot: RobotState):
        config.validate()
        self.config = config
        self.robot = robot
        self.dynamic_obstacles = list(config.dynamic_obstacles)
        disturbance_seed, perception_seed = np.random.SeedSequence(config.rng_seed).spawn(2)
        self.disturbance_rng = np.random.default_rng(disturbance_seed)
        self.perception_rng = np.random.default_rng(perception_seed)

    @property
    def static_obstacles(self) -> tuple[Disc, ...]:
        return self.config.static_obstacles

    @property
    def time(self) -> float:
        return self.robot.time_step * self.config.sampling_time

    def obstacle_centers(self) -> np.ndarray:
        """Centers of all obstacles (static first) as an (n, 2) array."""
        centers = [[disc.center.x, disc.center.y] for disc in self.static_obstacles]
        centers += [[obstacle.position.x, obstacle.position.y] for obstacle in self.dynamic_obstacles]
        return np.array(centers, dtype=float).reshape(-1, 2)

    def obstacle_radii(self) -> np.ndarray:
        radii = [disc.radius for disc in self.static_obstacles]
        radii += [self.config.obstacle_radius] * len(self.dynamic_obstacles)
        return np.array(radii, dtype=float)

    def perceive(self) -> PerceptionSnapshot:
        return perceive(self, self.robot, self.perception_rng)

    def advance(self, control: tuple[float, float]) -> RobotState:
        """Applies one input to the robot and moves every dynamic obstacle by one sampling time."""
        c = self.config.sampling_time
        self.robot = step_robot_truth(self.robot, control, c, self.disturbance_rng, self.config.disturbance_bound)
        self.dynamic_obstacles = [step_dynamic_obstacle(obstacle, c) for obstacle in self.dynamic_obstacles]
        return self.robot

    def collision(self) -> bool:
        return check_collision(self.robot, self)

    def min_obstacle_distance(self) -> float:
        return min_obstacle_distance(self.robot, self)


def perceive(world: World, robot: RobotState, rng: np.random.Generator) -> PerceptionSnapshot:
    """
    Builds the robot's view of the world.

    Obstacles whose disc intersects the perception disc are reported. A perception error is drawn for every dynamic
    obstacle, visible or not, so the random stream does not depend on what the robot sees.
    """
    config = world.config
    origin = robot.position
    visible_static = tuple(
        disc for disc in world.static_obstacles
        if disc.center.distance_to(origin) <= config.perception_radius + disc.radius
    )
    errors = sample_in_disc(rng, config.perception_error_bound, len(world.dynamic_obstacles))
    visible_dynamic = []
    for identifier, (obstacle, error) in enumerate(zip(world.dynamic_obstacles, errors)):
        if obstacle.position.distance_to(origin) <= config.perception_radius + config.obstacle_radius:
            visible_dynamic.append(
                PerceivedObstacle(identifier, obstacle.position + Vec2(error[0], error[1]), obstacle.velocity)
            )
    return PerceptionSnapshot(
        visible_static=visible_static,
        visible_dynamic=tuple(visible_dynamic),
        robot_state=robot,
        perception_radius=config.perception_radius,
        obstacle_radius=config.obstacle_radius,
        robot_radius=config.robot_radius,
        arena=(config.arena_width, config.arena_height),
        sampling_time=config.sampling_time,
    )


def check_collision(robot: RobotState, world: World) -> bool:
    """True when any ground-truth obstacle center is within robot radius plus obstacle radius (closed condition)."""
    centers = world.obstacle_centers()
    if len(centers) == 0:
        return False
    distances = np.hypot(centers[:, 0] - robot.x, centers[:, 1] - robot.y)
    limits = world.config.robot_radius + world.obstacle_radii()
    return bool(np.any(distances <= limits))


def min_obstacle_distance(robot: RobotState, world: World) -> float:
    """Distance from the robot center to the closest ground-truth obstacle center."""
    centers = world.obstacle_centers()
    if len(centers) == 0:
        return math.inf
    return float(np.min(np.hypot(centers[:, 0] - robot.x, centers[:, 1] - robot.y)))


@dataclass
class ObstacleSampling:
    """Ranges used to draw dynamic obstacles around their attraction points."""

    offset_range: tuple[float, float] = (2.0, 3.0)
    velocity_range: tuple[float, float] = (-0.3, 0.3)
    eta_range: tuple[float, float] = (0.0, 1.0)
    limits: RobotLimits = field(default_factory=RobotLimits)

    def draw(self, attraction: Vec2, rng: np.random.Generator) -> DynamicObstacleState:
        """Draws one obstacle: offsets per axis with a random sign, velocities and eta all uniform."""
        offsets = rng.uniform(*self.offset_range, size=2) * rng.choice([-1.0, 1.0], size=2)
        velocity = rng.uniform(*self.velocity_range, size=2)
        eta = float(rng.uniform(*self.eta_range))
        position = attraction + Vec2(offsets[0], offsets[1])
        provisional = DynamicObstacleState(position, Vec2(velocity[0], velocity[1]), attraction, 1.0, 1.0)
        alpha, beta = compute_multipliers(provisional, self.limits.velocity_component_bounds(), eta)
        return replace(provisional, alpha=alpha, beta=beta)
