"""
Experiment orchestration: controllers, the plan-track-replan loop, outcome adjudication and aggregation.

A run perceives the world, asks the controller for a decision, applies the input to the disturbed ground truth and
then checks, in this order, collision, arrival and livelock. Control-flow failures of the planner and the tracker
are handled inside the controllers; only configuration errors leave run_scenario, and they do so before the first
step is simulated.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Protocol

import numpy as np
import pandas as pd

from robot_navigation_simulation.baselines import ApfParams, HlrrtParams, apf_step, follow_path, hlrrt_plan
from robot_navigation_simulation.geometry import Vec2
from robot_navigation_simulation.heuristic_planner import (
    DeadEndError,
    InfeasiblePlanError,
    PlannerSettings,
    PlanRequest,
    ReferenceTrajectory,
    plan_with_dynamics,
)
from robot_navigation_simulation.pattern_search import SearchSettings
from robot_navigation_simulation.tube_mpc import (
    GainSynthesisError,
    TmpcConfig,
    TmpcProblem,
    TmpcSolution,
    ancillary_input,
    braking_inputs,
    planning_radius,
    safest_inputs,
    solve,
    synthesize_gain,
    tube_width_obstacle,
    tube_width_robot,
)
from robot_navigation_simulation.world_simulation import PerceptionSnapshot, RobotState, World, WorldConfig

logger = logging.getLogger(__name__)

CONTROLLERS = ("htmpc", "hlrrt", "apf")
BUDGETED = "budgeted"
RUN_TO_COMPLETION = "run-to-completion"
SETUPS = (BUDGETED, RUN_TO_COMPLETION)
BUDGET_MODES = ("iterations", "wall-clock")


class InvalidScenarioConfigError(Exception):
    """Error raised when a scenario configuration cannot be simulated"""


class EmptyResultsError(Exception):
    """Error raised when results are aggregated from an empty list"""


class FailureCause(str, enum.Enum):
    NONE = "none"
    COLLISION = "collision"
    LIVELOCK = "livelock"
    INFEASIBLE = "infeasible"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class HarnessSettings:
    """Adjudication thresholds and modeled costs of the run loop."""

    arrival_tolerance: float = 0.2
    livelock_window: float = 15.0
    livelock_improvement: float = 0.1
    livelock_movement: float = 1.0
    dead_end_window: float = 10.0
    replan_interval: int = 1
    seconds_per_plan: float = 0.005
    seconds_per_apf_step: float = 1e-4


@dataclass(frozen=True)
class ScenarioConfig:
    """
    One fully specified run.

    The world's own seed is replaced by rng_seed when the world is built, so a single number fixes every random
    stream of the run. decision_budget is only used in the budgeted setup.
    """

    world: WorldConfig
    start: Vec2
    target: Vec2
    rng_seed: int
    start_heading: float | None = None
    controller: str = "htmpc"
    setup: str = BUDGETED
    decision_budget: float = 0.15
    max_mission_time: float = 120.0
    budget_mode: str = "iterations"
    case: str = ""
    scenario_id: str = ""
    reconstruction: bool = False
    tmpc: TmpcConfig = field(default_factory=TmpcConfig)
    planner: PlannerSettings = field(default_factory=PlannerSettings)
    search: SearchSettings = field(default_factory=SearchSettings)
    hlrrt: HlrrtParams = field(default_factory=HlrrtParams)
    apf: ApfParams = field(default_factory=ApfParams)
    harness: HarnessSettings = field(default_factory=HarnessSettings)

    @property
    def budget(self) -> float | None:
        return self.decision_budget if self.setup == BUDGETED else None

    @property
    def heading(self) -> float:
        if self.start_heading is not None:
            return self.start_heading
        return (self.target - self.start).angle() if self.target.distance_to(self.start) > 0.0 else 0.0

    def with_overrides(self, setup: str | None = None, rng_seed: int | None = None, controller: str | None = None):
        changes = {}
        if setup is not None:
            changes["setup"] = setup
        if rng_seed is not None:
            changes["rng_seed"] = rng_seed
        if controller is not None:
            changes["controller"] = controller
        return replace(self, **changes)

    def validate(self) -> None:
        """
        Raises
        ------
        InvalidScenarioConfigError
            If an enumerated option is unknown, the budget is not positive in the budgeted setup, or the start or
            target lies outside the arena or inside an inflated obstacle.
        """
        self.world.validate()
        self.tmpc.validate()
        self.apf.validate()
        if self.controller not in CONTROLLERS:
            raise InvalidScenarioConfigError("Unknown controller: " + str(self.controller))
        if self.setup not in SETUPS:
            raise InvalidScenarioConfigError("Unknown setup: " + str(self.setup))
        if self.budget_mode not in BUDGET_MODES:
            raise InvalidScenarioConfigError("Unknown budget mode: " + str(self.budget_mode))
        if self.setup == BUDGETED and not self.decision_budget > 0.0:
            raise InvalidScenarioConfigError("Decision budget must be positive, got: " + str(self.decision_budget))
        if self.max_mission_time <= 0.0:
            raise InvalidScenarioConfigError("Mission time must be positive, got: " + str(self.max_mission_time))
        if self.harness.replan_interval < 1:
            raise InvalidScenarioConfigError(
                "Replan interval must be at least 1, got: " + str(self.harness.replan_interval)
            )
        for disc in self.world.static_obstacles:
            if disc.radius + self.world.robot_radius > self.tmpc.safety_radius:
                raise InvalidScenarioConfigError(
                    "Static obstacle of radius " + str(disc.radius) + " is not covered by the safety radius "
                    + str(self.tmpc.safety_radius)
                )
        for name, point in (("start", self.start), ("target", self.target)):
            if not (0.0 <= point.x <= self.world.arena_width and 0.0 <= point.y <= self.world.arena_height):
                raise InvalidScenarioConfigError(
                    name + " (" + str(point.x) + ", " + str(point.y) + ") is outside the arena"
                )
            for disc in self.world.static_obstacles:
                if point.distance_to(disc.center) <= disc.radius + self.world.robot_radius:
                    raise InvalidScenarioConfigError(
                        name + " (" + str(point.x) + ", " + str(point.y) + ") lies inside the static obstacle at ("
                        + str(disc.center.x) + ", " + str(disc.center.y) + ")"
                    )
            for obstacle in self.world.dynamic_obstacles:
                if point.distance_to(obstacle.position) <= self.world.collision_distance:
                    raise InvalidScenarioConfigError(
                        name + " (" + str(point.x) + ", " + str(point.y) + ") lies inside a dynamic obstacle at t=0"
                    )


@dataclass
class Decision:
    """Output of one controller call."""

    input: tuple[float, float]
    decision_time: float = 0.0
    dead_end: bool = False
    planned: bool = False
    replanned: bool = False
    infeasibility_signal: bool = False
    reference_point: tuple[float, float] | None = None
    robot_tube: float = 0.0
    obstacle_tube: float = 0.0
    diagnostics: dict = field(default_factory=dict)


class Controller(Protocol):
    name: str

    def decide(self, snapshot: PerceptionSnapshot) -> Decision:
        """Returns the input to apply at the snapshot's time step."""


def _controller_rng(seed: int) -> np.random.Generator:
    # the world uses the first two children of the same seed sequence
    return np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[2])


class HtmpcController:
    """
    Heuristic planner plus tube-based MPC tracker.

    A new reference is planned every replan_interval steps and whenever the tracker reports infeasibility. When
    planning fails, the previous reference is shifted and tracked with the ancillary law; when it keeps failing for
    the dead-end window, the mission is declared infeasible. Without a feasible tracking solution the input comes
    from `_fallback`.
    """

    name = "htmpc"

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.rng = _controller_rng(config.rng_seed)
        self.reference: ReferenceTrajectory | None = None
        self.solution: TmpcSolution | None = None
        self.previous_input = np.zeros(2)
        self.steps_since_plan = 0
        self.failing_since: float | None = None

    def _clock(self) -> float:
        return time.perf_counter()

    def _plan(self, snapshot: PerceptionSnapshot) -> tuple[ReferenceTrajectory | None, float]:
        config = self.config
        request = PlanRequest(
            snapshot=snapshot,
            final_target=config.target,
            horizon=config.tmpc.horizon,
            sampling_time=snapshot.sampling_time,
            safety_radius=config.tmpc.safety_radius,
            limits=config.tmpc.limits,
            tube=config.tmpc.tube,
            settings=config.planner,
        )
        started = self._clock()
        try:
            reference = plan_with_dynamics(request, self.rng)
        except (InfeasiblePlanError, DeadEndError) as error:
            logger.warning("Planning failed at step %d: %s", snapshot.time_step, error)
            reference = None
        cost = config.harness.seconds_per_plan if config.budget_mode == "iterations" else self._clock() - started
        return reference, cost

    def _problem(self, snapshot: PerceptionSnapshot, reference: ReferenceTrajectory) -> TmpcProblem:
        config = self.config
        state = snapshot.robot_state
        return TmpcProblem(
            current_state=state,
            previous_input=self.previous_input,
            reference=reference,
            snapshot=snapshot,
            config=config.tmpc,
            plan_radius=planning_radius(
                state.pose, reference.states, config.tmpc.safety_radius, config.tmpc.plan_margin
            ),
        )

    def _solve(self, snapshot: PerceptionSnapshot, reference: ReferenceTrajectory, budget: float | None, warm: bool):
        config = self.config
        problem = self._problem(snapshot, reference)
        warm_start = self.solution.warm_start() if warm and self.solution is not None else None
        return solve(problem, budget, self.rng, config.search, warm_start, config.budget_mode)

    def _ancillary(self, snapshot: PerceptionSnapshot, reference: ReferenceTrajectory) -> np.ndarray:
        limits = self.config.tmpc.limits
        reference_input = reference.inputs[0]
        try:
            gain = synthesize_gain(
                reference.initial_pose, reference_input, snapshot.sampling_time, self.config.tmpc.state_weight,
                self.config.tmpc.input_weight,
            ).gain
        except GainSynthesisError as error:
            logger.warning("Falling back to the reference input: %s", error)
            v, omega, _ = limits.clamp(float(reference_input[0]), float(reference_input[1]))
            return np.array([v, omega])
        control, _ = ancillary_input(reference_input, gain, snapshot.robot_state.pose, reference.initial_pose, limits)
        return control

    def _fallback(self, snapshot: PerceptionSnapshot, solution: TmpcSolution) -> tuple[np.ndarray, str]:
        """
        Input applied when the tracker has no usable solution: the ancillary law on the current reference unless
        the best infeasible solution or a braking maneuver keeps the predicted separations better.
        """
        limits, horizon = self.config.tmpc.limits, self.config.tmpc.horizon
        ancillary = np.vstack((self._ancillary(snapshot, self.reference)[None, :], self.reference.inputs[1:]))
        braking = braking_inputs(self.previous_input, limits, horizon)
        candidates = np.concatenate((ancillary[None, :, :], solution.inputs[None, :, :], braking))
        names = ["ancillary", "optimizer"] + ["braking"] * len(braking)
        index, violation = safest_inputs(self._problem(snapshot, self.reference), candidates)
        if index > 0:
            logger.warning(
                "Step %d: %s input replaces the ancillary law, predicted separation violation %.3g",
                snapshot.time_step, names[index], violation,
            )
        control = candidates[index][0]
        v, omega, _ = limits.clamp(float(control[0]), float(control[1]))
        return np.array([v, omega]), names[index]

    def _remaining(self, spent: float) -> float | None:
        budget = self.config.budget
        return None if budget is None else max(budget - spent, 0.0)

    def decide(self, snapshot: PerceptionSnapshot) -> Decision:
        config = self.config
        now = snapshot.time_step * snapshot.sampling_time
        decision = Decision((0.0, 0.0))
        started = self._clock()
        spent = 0.0

        fresh = None
        due = self.reference is None or self.steps_since_plan >= config.harness.replan_interval
        if due or self.reference.exhausted:
            fresh, cost = self._plan(snapshot)
            spent += cost
            decision.planned = True
        if fresh is not None:
            self.reference, self.steps_since_plan, self.failing_since = fresh, 0, None
        elif decision.planned:
            self.failing_since = now if self.failing_since is None else self.failing_since
            if now - self.failing_since >= config.harness.dead_end_window:
                decision.dead_end = True
                return decision
            if self.reference is not None:
                self.reference = self.reference.shifted()

        if self.reference is None:
            self.previous_input = np.zeros(2)
            decision.decision_time = spent
            return decision

        solution = self._solve(snapshot, self.reference, self._remaining(spent), warm=True)
        spent += solution.solve_time
        if not solution.feasible:
            decision.infeasibility_signal = True
            decision.replanned = True
            replanned, cost = self._plan(snapshot)
            spent += cost
            if replanned is not None:
                self.reference, self.steps_since_plan = replanned, 0
                solution = self._solve(snapshot, self.reference, self._remaining(spent), warm=False)
                spent += solution.solve_time

        measured = self._clock() - started
        decision_time = spent if config.budget_mode == "iterations" else measured
        budget = config.budget
        overrun = config.budget_mode == "wall-clock" and budget is not None and decision_time > budget
        fallback = "none"
        if solution.feasible and not overrun:
            control = solution.first_input
            self.solution = solution
        else:
            if overrun:
                logger.warning(
                    "Decision at step %d took %.3f s, budget %.3f s", snapshot.time_step, decision_time, budget
                )
            control, fallback = self._fallback(snapshot, solution)
            self.solution = None

        self.previous_input = np.asarray(control, dtype=float)
        self.steps_since_plan += 1
        decision.input = (float(control[0]), float(control[1]))
        decision.decision_time = decision_time
        decision.reference_point = (float(self.reference.states[0][0]), float(self.reference.states[0][1]))
        decision.robot_tube = tube_width_robot(snapshot.time_step + 1, snapshot.time_step, config.tmpc.tube)
        decision.obstacle_tube = tube_width_obstacle(snapshot.time_step + 1, snapshot.time_step, config.tmpc.tube)
        decision.diagnostics = solution.diagnostics()
        decision.diagnostics["fallback"] = fallback
        return decision


class HlrrtController:
    """HL-RRT* decision per step; without a path the robot holds its position."""

    name = "hlrrt"

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.rng = _controller_rng(config.rng_seed)

    def decide(self, snapshot: PerceptionSnapshot) -> Decision:
        config, params = self.config, self.config.hlrrt
        started = time.perf_counter()
        path = hlrrt_plan(snapshot, config.target, config.budget, self.rng, params, config.budget_mode)
        if config.budget_mode == "iterations":
            full = params.max_samples * params.seconds_per_sample
            decision_time = full if config.budget is None else min(config.budget, full)
        else:
            decision_time = time.perf_counter() - started
        if path is None:
            return Decision((0.0, 0.0), decision_time, diagnostics={"path_found": False})
        v, omega = follow_path(path, snapshot, config.tmpc.limits, params.lookahead)
        aim = path.point_at(min(params.lookahead, path.length))
        return Decision(
            (v, omega), decision_time, reference_point=(aim.x, aim.y),
            diagnostics={"path_found": True, "path_length": path.length},
        )


class ApfController:
    """Horizon-based potential field decision per step."""

    name = "apf"

    def __init__(self, config: ScenarioConfig):
        self.config = config

    def decide(self, snapshot: PerceptionSnapshot) -> Decision:
        started = time.perf_counter()
        v, omega = apf_step(snapshot, self.config.target, self.config.apf, self.config.tmpc.limits)
        if self.config.budget_mode == "iterations":
            decision_time = self.config.harness.seconds_per_apf_step
        else:
            decision_time = time.perf_counter() - started
        return Decision((v, omega), decision_time)


def make_controller(config: ScenarioConfig) -> Controller:
    if config.controller == "htmpc":
        return HtmpcController(config)
    if config.controller == "hlrrt":
        return HlrrtController(config)
    if config.controller == "apf":
        return ApfController(config)
    raise InvalidScenarioConfigError("Unknown controller: " + str(config.controller))


@dataclass
class RunMetrics:
    """Outcome of one run; path and time statistics only mean something for successful runs."""

    success: bool
    failure_cause: FailureCause
    path_length: float
    mission_time: float
    min_distance: list[tuple[float, float]] = field(default_factory=list)
    decision_times: list[float] = field(default_factory=list)
    replan_count: int = 0
    infeasibility_signals: int = 0
    plan_count: int = 0
    controller: str = ""
    setup: str = ""
    scenario_id: str = ""
    case: str = ""
    seed: int = 0

    def summary(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "case": self.case,
            "controller": self.controller,
            "setup": self.setup,
            "seed": self.seed,
            "success": self.success,
            "failure_cause": self.failure_cause.value,
            "path_length": self.path_length,
            "mission_time": self.mission_time,
            "replan_count": self.replan_count,
            "infeasibility_signals": self.infeasibility_signals,
            "plan_count": self.plan_count,
            "min_obstacle_distance": min((d for _, d in self.min_distance), default=math.inf),
            "max_decision_time": max(self.decision_times, default=0.0),
        }


@dataclass
class TraceRecord:
    time: float
    x: float
    y: float
    theta: float
    v: float
    omega: float
    min_distance: float
    decision_time: float
    snapshot_digest: str
    reference_x: float = math.nan
    reference_y: float = math.nan
    robot_tube: float = 0.0
    obstacle_tube: float = 0.0
    diagnostics: dict = field(default_factory=dict)


@dataclass
class RunTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def to_frame(self) -> pd.DataFrame:
        """One row per step indexed by time; diagnostics become columns prefixed with diag_."""
        rows = []
        for record in self.records:
            row = asdict(record)
            diagnostics = row.pop("diagnostics")
            row.update({"diag_" + key: value for key, value in diagnostics.items()})
            rows.append(row)
        frame = pd.DataFrame(rows)
        if not frame.empty:
            frame.set_index("time", inplace=True)
        return frame


def snapshot_digest(snapshot: PerceptionSnapshot) -> str:
    """Short hash of what the robot perceived, for comparing traces."""
    digest = hashlib.sha256()
    digest.update(np.asarray(snapshot.robot_state.pose, dtype=float).tobytes())
    for disc in snapshot.visible_static:
        digest.update(np.array([disc.center.x, disc.center.y, disc.radius]).tobytes())
    for obstacle in snapshot.visible_dynamic:
        digest.update(
            np.array([obstacle.identifier, obstacle.position.x, obstacle.position.y, obstacle.velocity.x,
                      obstacle.velocity.y]).tobytes()
        )
    return digest.hexdigest()[:16]


def detect_livelock(
    positions: np.ndarray,
    target: Vec2,
    sampling_time: float,
    window: float = 15.0,
    improvement: float = 0.1,
    movement: float = 1.0,
) -> bool:
    """
    True when the trailing window brought no improvement of the best distance to the target beyond `improvement`
    while the robot moved at least `movement` meters. Shorter histories are never a livelock.
    """
    steps = int(round(window / sampling_time))
    positions = np.asarray(positions, dtype=float)
    if len(positions) <= steps:
        return False
    distances = np.linalg.norm(positions - target.as_array(), axis=1)
    best_before = float(np.min(distances[: len(positions) - steps]))
    best_inside = float(np.min(distances[len(positions) - steps :]))
    moved = float(np.sum(np.linalg.norm(np.diff(positions[-steps - 1 :], axis=0), axis=1)))
    return best_before - best_inside <= improvement and moved >= movement


def run_scenario(config: ScenarioConfig) -> tuple[RunMetrics, RunTrace]:
    """
    Simulates one scenario until arrival, collision, livelock, dead end or the mission time limit.

    Raises
    ------
    InvalidScenarioConfigError
        Raised before the simulation starts when the configuration is invalid.
    """
    config.validate()
    world_config = replace(config.world, rng_seed=config.rng_seed)
    world = World(world_config, RobotState(config.start.x, config.start.y, config.heading))
    controller = make_controller(config)
    settings = config.harness
    c = world_config.sampling_time
    logger.info("Running scenario %s with %s (%s)", config.scenario_id, config.controller, config.setup)

    metrics = RunMetrics(
        success=False,
        failure_cause=FailureCause.TIMEOUT,
        path_length=0.0,
        mission_time=0.0,
        controller=config.controller,
        setup=config.setup,
        scenario_id=config.scenario_id,
        case=config.case,
        seed=config.rng_seed,
    )
    trace = RunTrace()
    positions = [config.start.as_array()]
    for _ in range(int(round(config.max_mission_time / c))):
        snapshot = world.perceive()
        decision = controller.decide(snapshot)
        metrics.decision_times.append(decision.decision_time)
        metrics.plan_count += int(decision.planned) + int(decision.replanned)
        metrics.replan_count += int(decision.replanned)
        metrics.infeasibility_signals += int(decision.infeasibility_signal)
        if decision.dead_end:
            metrics.failure_cause = FailureCause.INFEASIBLE
            break

        previous = world.robot.position
        robot = world.advance(decision.input)
        metrics.path_length += robot.position.distance_to(previous)
        metrics.mission_time = world.time
        positions.append(robot.position.as_array())
        distance = world.min_obstacle_distance()
        metrics.min_distance.append((world.time, distance))
        reference = decision.reference_point or (math.nan, math.nan)
        trace.records.append(
            TraceRecord(
                time=world.time,
                x=robot.x,
                y=robot.y,
                theta=robot.theta,
                v=decision.input[0],
                omega=decision.input[1],
                min_distance=distance,
                decision_time=decision.decision_time,
                snapshot_digest=snapshot_digest(snapshot),
                reference_x=reference[0],
                reference_y=reference[1],
                robot_tube=decision.robot_tube,
                obstacle_tube=decision.obstacle_tube,
                diagnostics=decision.diagnostics,
            )
        )

        if world.collision():
            metrics.failure_cause = FailureCause.COLLISION
            break
        if robot.position.distance_to(config.target) <= settings.arrival_tolerance:
            metrics.failure_cause = FailureCause.NONE
            metrics.success = True
            break
        if detect_livelock(
            np.array(positions), config.target, c, settings.livelock_window, settings.livelock_improvement,
            settings.livelock_movement,
        ):
            metrics.failure_cause = FailureCause.LIVELOCK
            break

    logger.info(
        "Scenario %s with %s finished: %s after %.1f s, path %.2f m",
        config.scenario_id, config.controller, metrics.failure_cause.value, metrics.mission_time, metrics.path_length,
    )
    return metrics, trace


def summary_frame(results: list[RunMetrics]) -> pd.DataFrame:
    """One row per run, in the given order."""
    return pd.DataFrame([metrics.summary() for metrics in results])


def aggregate(results: list[RunMetrics]) -> pd.DataFrame:
    """
    Success counts and path/time statistics per controller and setup.

    Means and sample standard deviations use successful runs only; NaN marks a statistic without enough successes.

    Raises
    ------
    EmptyResultsError
        If `results` is empty.
    """
    if not results:
        raise EmptyResultsError("No results to aggregate!")
    frame = summary_frame(results)
    rows = []
    for (controller, setup), group in frame.groupby(["controller", "setup"], sort=True):
        successes = group[group["success"]]
        rows.append(
            {
                "controller": controller,
                "setup": setup,
                "runs": len(group),
                "success_count": len(successes),
                "path_length_mean": successes["path_length"].mean(),
                "path_length_std": successes["path_length"].std(ddof=1),
                "mission_time_mean": successes["mission_time"].mean(),
                "mission_time_std": successes["mission_time"].std(ddof=1),
            }
        )
    summary = pd.DataFrame(rows)
    summary.set_index(["controller", "setup"], inplace=True)
    return summary
