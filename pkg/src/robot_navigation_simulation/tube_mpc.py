"""
Robust tube-based model predictive tracking of a planned reference.

The tracker minimizes a discounted tracking cost over the prediction horizon subject to the unicycle dynamics,
state and input boxes, a slew bound, a perception-zone bound and separations from static and dynamic obstacles.
Separations are tightened by tube widths that grow geometrically along the horizon, so the nominal solution stays
safe while the realized robot and the perceived obstacles deviate within their bounds. The nonlinear problem is
solved by the multi-start pattern search with an exact penalty, followed by an independent feasibility audit.

Raises:
    TubeDomainError: if a tube width is requested for a step that is not after the current one
    TrajectoryLengthError: if trajectories do not match the prediction horizon
    GainSynthesisError: if no stabilizing feedback gain can be synthesized
    InvalidTmpcConfigError: if a tracker configuration or problem violates its invariants
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
from scipy import linalg

from robot_navigation_simulation.pattern_search import SearchProblem, SearchSettings, make_starts, pattern_search
from robot_navigation_simulation.world_simulation import (
    PerceptionSnapshot,
    RobotLimits,
    RobotState,
    propagate_nominal_batch,
)

if TYPE_CHECKING:
    from robot_navigation_simulation.heuristic_planner import ReferenceTrajectory

logger = logging.getLogger(__name__)

PER_STEP = "per-step"
TIME_EXPONENT = "time-exponent"
DISCOUNT_MODES = (PER_STEP, TIME_EXPONENT)


class TubeDomainError(Exception):
    """Error raised when a tube width is requested outside its domain"""


class TrajectoryLengthError(Exception):
    """Error raised when trajectory lengths do not match the prediction horizon"""


class GainSynthesisError(Exception):
    """Error raised when no stabilizing feedback gain is found"""


class InvalidTmpcConfigError(Exception):
    """Error raised when a tracker configuration violates its invariants"""


@dataclass(frozen=True)
class TubeParameters:
    """Upper bounds and damping values of the robot and obstacle tubes."""

    robot_bound: float = 0.01
    robot_damping: float = 0.2
    obstacle_bound: float = 0.02
    obstacle_damping: float = 0.2

    def validate(self) -> None:
        for name in ("robot_damping", "obstacle_damping"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise TubeDomainError(name + " must lie in [0, 1], got: " + str(getattr(self, name)))
        for name in ("robot_bound", "obstacle_bound"):
            if getattr(self, name) < 0.0:
                raise TubeDomainError(name + " must be nonnegative, got: " + str(getattr(self, name)))


def tube_width(step: int, time_step: int, bound: float, damping: float) -> float:
    """
    Width of a tube at absolute step k for the problem solved at time step kappa.

    w_k = bound * sum_{i=0}^{k-kappa-1} (1 - damping)^i

    Raises:
        TubeDomainError: if k <= kappa, the damping is outside [0, 1] or the bound is negative.
    """
    if step <= time_step:
        raise TubeDomainError("Tube widths start at step " + str(time_step + 1) + ", got: " + str(step))
    if not 0.0 <= damping <= 1.0:
        raise TubeDomainError("Damping must lie in [0, 1], got: " + str(damping))
    if bound < 0.0:
        raise TubeDomainError("Tube bound must be nonnegative, got: " + str(bound))
    return bound * sum((1.0 - damping) ** i for i in range(step - time_step))


def tube_width_robot(step: int, time_step: int, tube: TubeParameters) -> float:
    return tube_width(step, time_step, tube.robot_bound, tube.robot_damping)


def tube_width_obstacle(step: int, time_step: int, tube: TubeParameters) -> float:
    return tube_width(step, time_step, tube.obstacle_bound, tube.obstacle_damping)


def tube_widths(horizon: int, bound: float, damping: float) -> np.ndarray:
    """Widths for the steps kappa+1..kappa+horizon."""
    return np.array([tube_width(j, 0, bound, damping) for j in range(1, horizon + 1)])


@dataclass(frozen=True)
class TmpcConfig:
    """
    Tracker configuration.

    state_lower and state_upper bound the position; None means the arena box. The heading is unbounded.
    """

    horizon: int = 5
    control_horizon: int = 5
    w1: float = 0.9
    w2: float = 0.01
    limits: RobotLimits = field(default_factory=RobotLimits)
    tube: TubeParameters = field(default_factory=TubeParameters)
    safety_radius: float = 0.6
    discount_mode: str = PER_STEP
    state_lower: tuple[float, float] | None = None
    state_upper: tuple[float, float] | None = None
    plan_margin: float = 0.1
    feasibility_tolerance: float = 1e-6
    state_weight: tuple[float, float, float] = (1.0, 1.0, 0.5)
    input_weight: tuple[float, float] = (0.1, 0.1)

    def validate(self) -> None:
        if not 1 <= self.control_horizon <= self.horizon:
            raise InvalidTmpcConfigError(
                "Horizons must satisfy 1 <= N^c <= N^p, got: N^c=" + str(self.control_horizon)
                + ", N^p=" + str(self.horizon)
            )
        if not 0.0 < self.w1 < 1.0:
            raise InvalidTmpcConfigError("w1 must lie in (0, 1), got: " + str(self.w1))
        if self.w2 < 0.0:
            raise InvalidTmpcConfigError("w2 must be nonnegative, got: " + str(self.w2))
        if self.discount_mode not in DISCOUNT_MODES:
            raise InvalidTmpcConfigError("Unknown discount mode: " + str(self.discount_mode))
        self.tube.validate()
        self.limits.validate()


def discount_weights(horizon: int, w1: float, mode: str = PER_STEP, time_step: int = 0) -> np.ndarray:
    """Tracking weights of the steps kappa+1..kappa+horizon."""
    offsets = np.arange(1, horizon + 1, dtype=float)
    if mode == PER_STEP:
        return w1**offsets
    if mode == TIME_EXPONENT:
        return w1 ** ((time_step + offsets) / (time_step + 1.0))
    raise InvalidTmpcConfigError("Unknown discount mode: " + str(mode))


def _tracking_errors(states: np.ndarray, reference_states: np.ndarray) -> np.ndarray:
    difference = states - reference_states
    difference[..., 2] = np.mod(difference[..., 2] + math.pi, 2.0 * math.pi) - math.pi
    return np.linalg.norm(difference, axis=-1)


def objective(
    states: np.ndarray,
    inputs: np.ndarray,
    reference_states: np.ndarray,
    w1: float,
    w2: float,
    mode: str = PER_STEP,
    time_step: int = 0,
) -> float:
    """
    Discounted tracking cost plus input effort.

    Parameters
    ----------
    states : np.ndarray
        Predicted poses at kappa+1..kappa+N, shape (N, 3).
    inputs : np.ndarray
        Inputs at kappa..kappa+N-1, shape (N, 2).
    reference_states : np.ndarray
        Reference poses at kappa+1..kappa+N, shape (N, 3).

    Raises
    ------
    TrajectoryLengthError
        If the three trajectories do not have the same length.
    """
    states = np.asarray(states, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    reference_states = np.asarray(reference_states, dtype=float)
    if not len(states) == len(inputs) == len(reference_states):
        raise TrajectoryLengthError(
            "Trajectory lengths differ: states " + str(len(states)) + ", inputs " + str(len(inputs))
            + ", reference " + str(len(reference_states))
        )
    weights = discount_weights(len(states), w1, mode, time_step)
    return float(weights @ _tracking_errors(states, reference_states) + w2 * np.sum(inputs * inputs))


def objective_batch(
    states: np.ndarray, inputs: np.ndarray, reference_states: np.ndarray, weights: np.ndarray, w2: float
) -> np.ndarray:
    """Vectorized objective over (m, N, 3) states and (m, N, 2) inputs."""
    return _tracking_errors(states, reference_states[None, :, :]) @ weights + w2 * np.sum(inputs * inputs, axis=(1, 2))


@dataclass
class TmpcProblem:
    """The tracking problem of time step kappa, with the current state and the previously applied input given."""

    current_state: RobotState
    previous_input: np.ndarray
    reference: ReferenceTrajectory
    snapshot: PerceptionSnapshot
    config: TmpcConfig
    plan_radius: float

    def __post_init__(self) -> None:
        self.previous_input = np.asarray(self.previous_input, dtype=float)
        if len(self.reference.states) != self.config.horizon or len(self.reference.inputs) != self.config.horizon:
            raise TrajectoryLengthError(
                "Reference covers " + str(len(self.reference.states)) + " steps, horizon is "
                + str(self.config.horizon)
            )
        if self.plan_radius <= self.config.safety_radius:
            raise InvalidTmpcConfigError(
                "Planning radius " + str(self.plan_radius) + " must exceed the safety radius "
                + str(self.config.safety_radius)
            )

    @property
    def time_step(self) -> int:
        return self.current_state.time_step


def planning_radius(position: np.ndarray, reference_states: np.ndarray, safety_radius: float, margin: float = 0.1):
    """Largest distance from the robot to the reference window, floored so the perception zone is never empty."""
    reach = float(np.max(np.linalg.norm(reference_states[:, :2] - position[None, :2], axis=1)))
    return safety_radius + max(margin, reach)


@dataclass(frozen=True)
class ConstraintRecord:
    """One scalar constraint: its label, the absolute step it applies to and the obstacle it concerns."""

    label: str
    step: int
    obstacle: int | None = None
    bound: float = 0.0
    center: tuple[float, float] | None = None


@dataclass
class ConstraintSet:
    """
    All constraints of one tracking problem.

    Separations are also stored as flat arrays (window index, center, minimum distance) for the vectorized
    penalty; `records` keeps one labeled entry per scalar constraint for auditing and counting.
    """

    records: list[ConstraintRecord]
    time_step: int
    previous_input: np.ndarray
    state_lower: np.ndarray
    state_upper: np.ndarray
    input_lower: np.ndarray
    input_upper: np.ndarray
    u_smooth: float
    origin: np.ndarray
    zone_radius: float
    separation_index: np.ndarray
    separation_centers: np.ndarray
    separation_bounds: np.ndarray

    def count(self, label: str) -> int:
        return sum(1 for record in self.records if record.label == label)

    def labels(self) -> list[str]:
        return sorted({record.label for record in self.records})

    def violations(self, states: np.ndarray, inputs: np.ndarray) -> np.ndarray:
        """Sum of constraint violations for (m, N, 3) states and (m, N, 2) inputs."""
        positions = states[:, :, :2]
        total = np.sum(np.maximum(self.state_lower - positions, 0.0), axis=(1, 2))
        total += np.sum(np.maximum(positions - self.state_upper, 0.0), axis=(1, 2))
        total += np.sum(np.maximum(self.input_lower - inputs, 0.0), axis=(1, 2))
        total += np.sum(np.maximum(inputs - self.input_upper, 0.0), axis=(1, 2))
        previous = np.concatenate((np.broadcast_to(self.previous_input, (len(inputs), 1, 2)), inputs[:, :-1]), axis=1)
        slew = np.linalg.norm(inputs - previous, axis=2)
        total += np.sum(np.maximum(slew - self.u_smooth, 0.0), axis=1)
        zone = np.linalg.norm(positions - self.origin, axis=2)
        total += np.sum(np.maximum(zone - self.zone_radius, 0.0), axis=1)
        return total + self.separation_violations(states)

    def separation_violations(self, states: np.ndarray) -> np.ndarray:
        """Sum of the static and dynamic separation violations for (m, N, 3) states."""
        if not len(self.separation_bounds):
            return np.zeros(len(states))
        gaps = np.linalg.norm(states[:, self.separation_index, :2] - self.separation_centers, axis=2)
        return np.sum(np.maximum(self.separation_bounds - gaps, 0.0), axis=1)

    def active(self, states: np.ndarray, inputs: np.ndarray, tolerance: float = 1e-3) -> list[str]:
        """Labels of the separation constraints that are within `tolerance` of their bound."""
        active = []
        for record in self.records:
            if record.center is None:
                continue
            position = states[record.step - self.time_step - 1, :2]
            if np.linalg.norm(position - np.asarray(record.center)) - record.bound <= tolerance:
                active.append(record.label + "@" + str(record.step))
        return active


def build_constraints(problem: TmpcProblem) -> ConstraintSet:
    """
    Emits every constraint of the tracking problem at time step kappa.

    Static separations apply at kappa+1..kappa+N. For each dynamic obstacle the separation from its predicted
    position at the previous step applies for k > kappa+1, at the same step for every k, and at the next step for
    k < kappa+N.
    """
    config = problem.config
    horizon, kappa = config.horizon, problem.time_step
    snapshot = problem.snapshot
    c = snapshot.sampling_time
    robot_widths = tube_widths(horizon, config.tube.robot_bound, config.tube.robot_damping)
    obstacle_widths = tube_widths(horizon, config.tube.obstacle_bound, config.tube.obstacle_damping)
    safety = config.safety_radius

    records = []
    for j in range(1, horizon + 1):
        records.append(ConstraintRecord("dynamics", kappa + j))
        records.append(ConstraintRecord("state_box", kappa + j))
        records.append(ConstraintRecord("input_box", kappa + j - 1))
        records.append(ConstraintRecord("input_slew", kappa + j - 1, bound=config.limits.u_smooth))
        records.append(ConstraintRecord("perception_zone", kappa + j, bound=problem.plan_radius - safety))

    for index, disc in enumerate(snapshot.visible_static):
        for j in range(1, horizon + 1):
            records.append(
                ConstraintRecord(
                    "static_separation", kappa + j, index, safety + robot_widths[j - 1], (disc.center.x, disc.center.y)
                )
            )

    for obstacle in snapshot.visible_dynamic:
        for j in range(1, horizon + 1):
            records.append(ConstraintRecord("obstacle_prediction", kappa + j, obstacle.identifier))
        predicted = {
            j: (obstacle.position.x + j * c * obstacle.velocity.x, obstacle.position.y + j * c * obstacle.velocity.y)
            for j in range(1, horizon + 1)
        }
        for j in range(1, horizon + 1):
            for label, partner in (
                ("dynamic_separation_previous", j - 1),
                ("dynamic_separation_current", j),
                ("dynamic_separation_next", j + 1),
            ):
                if 1 <= partner <= horizon:
                    bound = safety + robot_widths[j - 1] + obstacle_widths[partner - 1]
                    records.append(ConstraintRecord(label, kappa + j, obstacle.identifier, bound, predicted[partner]))

    separations = [record for record in records if record.center is not None]
    if config.state_lower is None:
        state_lower = np.zeros(2)
        state_upper = np.array(snapshot.arena, dtype=float)
    else:
        state_lower, state_upper = np.array(config.state_lower), np.array(config.state_upper)
    return ConstraintSet(
        records=records,
        time_step=kappa,
        previous_input=problem.previous_input,
        state_lower=state_lower,
        state_upper=state_upper,
        input_lower=config.limits.lower,
        input_upper=config.limits.upper,
        u_smooth=config.limits.u_smooth,
        origin=problem.current_state.pose[:2],
        zone_radius=problem.plan_radius - safety,
        separation_index=np.array([record.step - kappa - 1 for record in separations], dtype=int),
        separation_centers=np.array([record.center for record in separations], dtype=float).reshape(-1, 2),
        separation_bounds=np.array([record.bound for record in separations], dtype=float),
    )


def audit_constraints(problem: TmpcProblem, constraints: ConstraintSet, states: np.ndarray, inputs: np.ndarray):
    """
    Re-evaluates every constraint record one by one and returns the largest violation.

    The dynamics are checked by propagating the inputs again from the current state.
    """
    kappa = problem.time_step
    c = problem.snapshot.sampling_time
    worst = 0.0
    rollout = propagate_nominal_batch(problem.current_state.pose, inputs[None, :, :], c)[0]
    for record in constraints.records:
        j = record.step - kappa
        if record.label == "dynamics":
            difference = rollout[j - 1] - states[j - 1]
            difference[2] = math.remainder(difference[2], 2.0 * math.pi)
            violation = float(np.max(np.abs(difference)))
        elif record.label == "state_box":
            position = states[j - 1, :2]
            violation = float(
                max(np.max(constraints.state_lower - position), np.max(position - constraints.state_upper), 0.0)
            )
        elif record.label == "input_box":
            control = inputs[j]
            violation = float(
                max(np.max(constraints.input_lower - control), np.max(control - constraints.input_upper), 0.0)
            )
        elif record.label == "input_slew":
            previous = problem.previous_input if j == 0 else inputs[j - 1]
            violation = max(float(np.linalg.norm(inputs[j] - previous)) - record.bound, 0.0)
        elif record.label == "perception_zone":
            violation = max(float(np.linalg.norm(states[j - 1, :2] - constraints.origin)) - record.bound, 0.0)
        elif record.center is not None:
            gap = float(np.linalg.norm(states[j - 1, :2] - np.asarray(record.center)))
            violation = max(record.bound - gap, 0.0)
        else:
            violation = 0.0
        worst = max(worst, violation)
    return worst


@dataclass(frozen=True)
class FeedbackGain:
    """Linearization of the kinematics at a reference point with its stabilizing gain."""

    gain: np.ndarray
    a_matrix: np.ndarray
    b_matrix: np.ndarray
    spectral_radius: float


def jacobians(reference_state: np.ndarray, reference_input: np.ndarray, sampling_time: float):
    """Jacobians A = df/dx and B = df/du of the unicycle update at the reference point."""
    theta = reference_state[2]
    v, omega = reference_input
    c = sampling_time
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    a_matrix = np.array(
        [
            [1.0, 0.0, c * (-v * sin_t - c * omega * v * cos_t)],
            [0.0, 1.0, c * (v * cos_t - c * omega * v * sin_t)],
            [0.0, 0.0, 1.0],
        ]
    )
    b_matrix = np.array(
        [
            [c * (cos_t - c * omega * sin_t), -c * c * v * sin_t],
            [c * (sin_t + c * omega * cos_t), c * c * v * cos_t],
            [0.0, c],
        ]
    )
    return a_matrix, b_matrix


def spectral_radius(matrix: np.ndarray) -> float:
    return float(np.max(np.abs(linalg.eigvals(matrix))))


def is_stabilizing(a_matrix: np.ndarray, b_matrix: np.ndarray, gain: np.ndarray) -> bool:
    return spectral_radius(a_matrix + b_matrix @ gain) < 1.0


def synthesize_gain(
    reference_state: np.ndarray,
    reference_input: np.ndarray,
    sampling_time: float,
    state_weight: tuple[float, float, float] = (1.0, 1.0, 0.5),
    input_weight: tuple[float, float] = (0.1, 0.1),
    min_speed: float = 0.05,
    attempts: int = 3,
) -> FeedbackGain:
    """
    Discrete LQR gain for the error dynamics linearized at a reference point.

    Below `min_speed` the position is not controllable through the heading, so the reference speed is raised to
    min_speed for the linearization. When the Riccati equation fails or the closed loop is not stable, the input
    weight is increased tenfold and the state weight slightly regularized before retrying.

    Raises
    ------
    GainSynthesisError
        If no attempt produces a closed loop with spectral radius below 1.
    """
    v, omega = float(reference_input[0]), float(reference_input[1])
    if abs(v) < min_speed:
        v = math.copysign(min_speed, v) if v != 0.0 else min_speed
    a_matrix, b_matrix = jacobians(np.asarray(reference_state, dtype=float), (v, omega), sampling_time)
    state_cost = np.diag(state_weight)
    input_cost = np.diag(input_weight)
    for attempt in range(attempts):
        try:
            riccati = linalg.solve_discrete_are(a_matrix, b_matrix, state_cost, input_cost)
            gain = -linalg.pinv(b_matrix.T @ riccati @ b_matrix + input_cost) @ b_matrix.T @ riccati @ a_matrix
            radius = spectral_radius(a_matrix + b_matrix @ gain)
            if radius < 1.0:
                return FeedbackGain(gain, a_matrix, b_matrix, radius)
        except (linalg.LinAlgError, ValueError) as error:
            logger.debug("Riccati attempt %d failed: %s", attempt, error)
        input_cost = input_cost * 10.0
        state_cost = state_cost + 1e-6 * np.eye(3)
    raise GainSynthesisError(
        "No stabilizing gain at reference state " + str(list(reference_state)) + " and input " + str([v, omega])
    )


def ancillary_input(
    reference_input: np.ndarray,
    gain: np.ndarray,
    state: np.ndarray,
    reference_state: np.ndarray,
    limits: RobotLimits,
) -> tuple[np.ndarray, bool]:
    """u = u_ref + K (x - x_ref), clamped to the input box; the flag tells whether clamping was needed."""
    error = np.asarray(state, dtype=float) - np.asarray(reference_state, dtype=float)
    error[2] = math.remainder(error[2], 2.0 * math.pi)
    raw = np.asarray(reference_input, dtype=float) + gain @ error
    v, omega, clamped = limits.clamp(float(raw[0]), float(raw[1]))
    return np.array([v, omega]), clamped


def braking_inputs(previous_input: np.ndarray, limits: RobotLimits, horizon: int) -> np.ndarray:
    """
    Input sequences that slow down as fast as the slew bound allows, one going straight and one turning at each
    angular velocity bound. Shape (3, horizon, 2).
    """
    steps = np.arange(1, horizon + 1, dtype=float)
    speeds = np.maximum(float(previous_input[0]) - steps * limits.u_smooth, limits.v_min)
    speeds = np.minimum(speeds, limits.v_max)
    sequences = np.empty((3, horizon, 2))
    for row, omega in enumerate((0.0, limits.omega_min, limits.omega_max)):
        sequences[row, :, 0] = speeds
        sequences[row, :, 1] = omega
    return sequences


def safest_inputs(problem: TmpcProblem, candidates: np.ndarray) -> tuple[int, float]:
    """
    Index of the (N, 2) input sequence whose nominal prediction violates the tightened separations least, and that
    violation. Candidates with the same violation keep their order.
    """
    candidates = np.asarray(candidates, dtype=float)
    states = propagate_nominal_batch(problem.current_state.pose, candidates, problem.snapshot.sampling_time)
    violations = build_constraints(problem).separation_violations(states)
    index = int(np.lexsort((np.arange(len(candidates)), np.round(violations, 9)))[0])
    return index, float(violations[index])


@dataclass
class TmpcSolution:
    """Optimized input sequence with its nominal prediction. Only the first input is meant to be applied."""

    inputs: np.ndarray
    predicted_states: np.ndarray
    objective: float
    feasible: bool
    solve_time: float
    evaluations: int = 0
    max_violation: float = 0.0
    robot_tube: np.ndarray = field(default_factory=lambda: np.empty(0))
    obstacle_tube: np.ndarray = field(default_factory=lambda: np.empty(0))
    active_constraints: list[str] = field(default_factory=list)
    control_horizon: int = 0

    @property
    def first_input(self) -> np.ndarray:
        return self.inputs[0]

    def warm_start(self) -> np.ndarray:
        """Free inputs shifted by one step, the last one repeated, flattened as a decision vector."""
        free = self.inputs[: self.control_horizon]
        shifted = np.vstack((free[1:], free[-1:])) if len(free) > 1 else free
        return shifted.reshape(-1)

    def diagnostics(self) -> dict:
        return {
            "objective": self.objective,
            "feasible": self.feasible,
            "solve_time": self.solve_time,
            "evaluations": self.evaluations,
            "max_violation": self.max_violation,
            "robot_tube": float(self.robot_tube[0]) if len(self.robot_tube) else 0.0,
            "obstacle_tube": float(self.obstacle_tube[0]) if len(self.obstacle_tube) else 0.0,
            "active_constraints": ";".join(self.active_constraints),
        }


def expand_inputs(decision: np.ndarray, control_horizon: int, horizon: int) -> np.ndarray:
    """Maps (m, 2 N^c) decision vectors to (m, N^p, 2) input sequences whose tail repeats the last free input."""
    free = decision.reshape(len(decision), control_horizon, 2)
    if horizon == control_horizon:
        return free
    tail = np.repeat(free[:, -1:, :], horizon - control_horizon, axis=1)
    return np.concatenate((free, tail), axis=1)


def solve(
    problem: TmpcProblem,
    budget: float | None,
    rng: np.random.Generator,
    settings: SearchSettings | None = None,
    warm_start: np.ndarray | None = None,
    budget_mode: str = "iterations",
) -> TmpcSolution:
    """
    Solves the tracking problem with the penalized multi-start pattern search.

    Parameters
    ----------
    budget : float or None
        Computation budget in seconds; None runs until the search converges or hits its caps.
    budget_mode : str
        "wall-clock" measures time, "iterations" converts the budget into an evaluation cap through
        settings.seconds_per_evaluation and reports the modeled solve time.

    Returns
    -------
    TmpcSolution
        feasible is False when the audited constraint violation of the best point exceeds the tolerance; the caller
        then asks the planner for a new reference.
    """
    settings = settings or SearchSettings()
    config = problem.config
    config.validate()
    horizon, control_horizon = config.horizon, config.control_horizon
    c = problem.snapshot.sampling_time
    constraints = build_constraints(problem)
    weights = discount_weights(horizon, config.w1, config.discount_mode, problem.time_step)
    reference_states = np.asarray(problem.reference.states, dtype=float)
    pose = problem.current_state.pose

    def evaluate(decisions: np.ndarray) -> np.ndarray:
        inputs = expand_inputs(decisions, control_horizon, horizon)
        states = propagate_nominal_batch(pose, inputs, c)
        cost = objective_batch(states, inputs, reference_states, weights, config.w2)
        return cost + settings.penalty_weight * constraints.violations(states, inputs)

    lower = np.tile(config.limits.lower, control_horizon)
    upper = np.tile(config.limits.upper, control_horizon)
    reference_decision = np.asarray(problem.reference.inputs, dtype=float)[:control_horizon].reshape(-1)
    starts = make_starts(warm_start, reference_decision, settings.start_count, rng, lower, upper)

    if budget_mode == "iterations":
        max_evaluations = settings.max_evaluations
        if budget is not None:
            max_evaluations = max(int(budget / settings.seconds_per_evaluation), 0)
        time_budget = None
    else:
        max_evaluations = settings.max_evaluations
        time_budget = budget
    search = SearchProblem(
        dimension=2 * control_horizon,
        evaluate=evaluate,
        lower=lower,
        upper=upper,
        starts=starts,
        budget=time_budget,
        max_iterations=settings.max_iterations,
        max_evaluations=max_evaluations,
        initial_step=settings.initial_step,
        mesh_tolerance=settings.mesh_tolerance,
    )
    result = pattern_search(search)

    inputs = expand_inputs(result.best[None, :], control_horizon, horizon)[0]
    states = propagate_nominal_batch(pose, inputs[None, :, :], c)[0]
    violation = audit_constraints(problem, constraints, states, inputs)
    feasible = violation <= config.feasibility_tolerance
    if budget_mode == "iterations":
        solve_time = result.evaluations * settings.seconds_per_evaluation
    else:
        solve_time = result.elapsed
    if not feasible:
        logger.warning(
            "Tracking problem at step %d infeasible, audited violation %.3g", problem.time_step, violation
        )
    return TmpcSolution(
        inputs=inputs,
        predicted_states=states,
        objective=objective(states, inputs, reference_states, config.w1, config.w2, config.discount_mode,
                            problem.time_step),
        feasible=feasible,
        solve_time=solve_time,
        evaluations=result.evaluations,
        max_violation=violation,
        robot_tube=tube_widths(horizon, config.tube.robot_bound, config.tube.robot_damping),
        obstacle_tube=tube_widths(horizon, config.tube.obstacle_bound, config.tube.obstacle_damping),
        active_constraints=constraints.active(states, inputs),
        control_horizon=control_horizon,
    )
