"""
Scenario files, result files and reconstructed scenario suites.

Scenario files are JSON documents with "schema_version": 1. Every hyperparameter that is not fixed by the method
lives in the file, so each run can be reproduced from its file alone. Missing optional blocks fall back to the
dataclass defaults; a missing required field or a value of the wrong type raises ScenarioSchemaError with the field
path and the line where the enclosing object starts.

Results are written as parquet files: one summary table per batch and, optionally, one trace table per run.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import MISSING, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd

from robot_navigation_simulation.baselines import ApfParams, HlrrtParams, InvalidApfParamsError, apf_preset
from robot_navigation_simulation.geometry import Disc, InvalidDiscError, NonFiniteCoordinateError, Vec2
from robot_navigation_simulation.heuristic_planner import PlannerSettings
from robot_navigation_simulation.pattern_search import SearchSettings
from robot_navigation_simulation.scenario_harness import (
    FailureCause,
    HarnessSettings,
    RunMetrics,
    RunTrace,
    ScenarioConfig,
    summary_frame,
)
from robot_navigation_simulation.tube_mpc import TmpcConfig, TubeParameters
from robot_navigation_simulation.world_simulation import (
    DynamicObstacleState,
    InvalidMultiplierError,
    ObstacleSampling,
    RobotLimits,
    WorldConfig,
    compute_multipliers,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
REQUIRED_FIELDS = ("schema_version", "scenario_id", "rng_seed", "start", "target", "world")
SCALAR_FIELDS = (
    "scenario_id", "case", "reconstruction", "rng_seed", "start_heading", "controller", "setup", "budget_mode",
    "decision_budget", "max_mission_time",
)
BLOCKS = {
    "limits": RobotLimits,
    "tube": TubeParameters,
    "tmpc": TmpcConfig,
    "planner": PlannerSettings,
    "search": SearchSettings,
    "hlrrt": HlrrtParams,
    "apf": ApfParams,
    "harness": HarnessSettings,
}
WORLD_SCALARS = (
    "obstacle_radius", "robot_radius", "perception_radius", "disturbance_bound", "perception_error_bound",
    "sampling_time",
)


class ScenarioSchemaError(Exception):
    """Error raised when a scenario document does not follow the schema"""

    def __init__(self, field_path: str, line: int, message: str):
        super().__init__(field_path + " (line " + str(line) + "): " + message)
        self.field_path = field_path
        self.line = line


class ScenarioFileError(Exception):
    """Error raised when a scenario or result file cannot be read or parsed"""


class UnknownCaseError(Exception):
    """Error raised when a scenario of an unknown case is requested"""


def _nth_item(text: str, position: int, index: int) -> int:
    """Offset of the index-th element of the first JSON array at or after `position`."""
    start = text.find("[", position)
    if start < 0:
        return position
    depth, item, in_string, offset = 0, 0, False, start
    while offset < len(text):
        char = text[offset]
        if in_string:
            if char == "\\":
                offset += 1
            elif char == '"':
                in_string = False
        elif char == '"':
            in_string = True
        elif char in "[{":
            depth += 1
            if depth == 2 and item == index:
                return offset
        elif char in "]}":
            depth -= 1
            if depth == 0:
                break
        elif char == "," and depth == 1:
            item += 1
        offset += 1
    return start


def line_of(text: str, field_path: str) -> int:
    """Line where the object enclosing `field_path` starts; the document root starts on line 1."""
    tokens = re.findall(r"([^.\[\]]+)|\[(\d+)\]", field_path)[:-1]
    position = 0
    for key, index in tokens:
        if key:
            found = text.find('"' + key + '"', position)
            if found < 0:
                break
            position = found
        else:
            position = _nth_item(text, position, int(index))
    if not tokens:
        position = max(text.find("{"), 0)
    return text.count("\n", 0, position) + 1


class _Reader:
    """Typed access to a parsed document, raising schema errors that point back into the text."""

    def __init__(self, text: str):
        self.text = text

    def error(self, field_path: str, message: str) -> ScenarioSchemaError:
        return ScenarioSchemaError(field_path, line_of(self.text, field_path), message)

    def require(self, block: dict, key: str, path: str) -> Any:
        if key not in block:
            raise self.error(path + key, "required field is missing")
        return block[key]

    def object(self, value: Any, path: str) -> dict:
        if not isinstance(value, dict):
            raise self.error(path, "expected an object, got " + type(value).__name__)
        return value

    def number(self, value: Any, path: str) -> float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise self.error(path, "expected a number, got " + repr(value))
        return float(value)

    def integer(self, value: Any, path: str) -> int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise self.error(path, "expected an integer, got " + repr(value))
        return value

    def point(self, value: Any, path: str) -> Vec2:
        if not isinstance(value, list) or len(value) != 2:
            raise self.error(path, "expected a pair of coordinates, got " + repr(value))
        try:
            return Vec2(self.number(value[0], path + "[0]"), self.number(value[1], path + "[1]"))
        except NonFiniteCoordinateError as error:
            raise self.error(path, str(error)) from error

    def coerce(self, value: Any, default: Any, path: str) -> Any:
        """Converts a JSON value to the type of a dataclass default."""
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise self.error(path, "expected true or false, got " + repr(value))
            return value
        if isinstance(default, int):
            return self.integer(value, path)
        if isinstance(default, float):
            return self.number(value, path)
        if isinstance(default, str):
            if not isinstance(value, str):
                raise self.error(path, "expected a string, got " + repr(value))
            return value
        if isinstance(default, tuple) or (default is None and isinstance(value, list)):
            if not isinstance(value, list):
                raise self.error(path, "expected a list, got " + repr(value))
            return tuple(self.number(item, path + "[" + str(i) + "]") for i, item in enumerate(value))
        if default is None:
            return None if value is None else self.number(value, path)
        raise self.error(path, "unsupported field")

    def dataclass(self, cls, block: Any, path: str, nested: dict | None = None):
        block = self.object(block, path)
        known = {item.name: item for item in fields(cls)}
        values = dict(nested or {})
        for key, value in block.items():
            item = known.get(key)
            if item is None or key in values:
                raise self.error(path + "." + key, "unknown field")
            default = item.default if item.default is not MISSING else item.default_factory()
            values[key] = self.coerce(value, default, path + "." + key)
        return cls(**values)


def _read_world(reader: _Reader, block: Any, rng_seed: int) -> WorldConfig:
    block = reader.object(block, "world")
    values: dict[str, Any] = {"rng_seed": rng_seed}
    for key in block:
        if key not in WORLD_SCALARS + ("arena", "static_obstacles", "dynamic_obstacles"):
            raise reader.error("world." + key, "unknown field")
    for key in WORLD_SCALARS:
        if key in block:
            values[key] = reader.number(block[key], "world." + key)
    if "arena" in block:
        arena = reader.point(block["arena"], "world.arena")
        values["arena_width"], values["arena_height"] = arena.x, arena.y
    radius = values.get("obstacle_radius", WorldConfig.obstacle_radius)

    statics = []
    for index, item in enumerate(reader.require(block, "static_obstacles", "world.")):
        path = "world.static_obstacles[" + str(index) + "]"
        item = reader.object(item, path)
        center = reader.point(reader.require(item, "center", path + "."), path + ".center")
        try:
            statics.append(Disc(center, reader.number(item.get("radius", radius), path + ".radius")))
        except InvalidDiscError as error:
            raise reader.error(path + ".radius", str(error)) from error
    values["static_obstacles"] = tuple(statics)

    dynamics = []
    for index, item in enumerate(reader.require(block, "dynamic_obstacles", "world.")):
        path = "world.dynamic_obstacles[" + str(index) + "]"
        item = reader.object(item, path)
        parts = {key: reader.point(reader.require(item, key, path + "."), path + "." + key)
                 for key in ("position", "velocity", "attraction")}
        alpha = reader.number(reader.require(item, "alpha", path + "."), path + ".alpha")
        beta = reader.number(reader.require(item, "beta", path + "."), path + ".beta")
        try:
            dynamics.append(DynamicObstacleState(alpha=alpha, beta=beta, **parts))
        except InvalidMultiplierError as error:
            raise reader.error(path, str(error)) from error
    values["dynamic_obstacles"] = tuple(dynamics)
    return WorldConfig(**values)


def parse_scenario(text: str) -> ScenarioConfig:
    """
    Builds a ScenarioConfig from the text of a scenario document.

    Raises
    ------
    ScenarioFileError
        If the text is not valid JSON.
    ScenarioSchemaError
        If a required field is missing, a field is unknown or a value has the wrong type.
    """
    try:
        document = json.loads(text)
    except json.JSONDecodeError as error:
        raise ScenarioFileError("Invalid JSON at line " + str(error.lineno) + ": " + error.msg) from error
    reader = _Reader(text)
    document = reader.object(document, "scenario")
    for key in REQUIRED_FIELDS:
        reader.require(document, key, "")
    version = reader.integer(document["schema_version"], "schema_version")
    if version != SCHEMA_VERSION:
        raise reader.error("schema_version", "unsupported version " + str(version))
    for key in document:
        if key not in REQUIRED_FIELDS + SCALAR_FIELDS and key not in BLOCKS:
            raise reader.error(key, "unknown field")

    rng_seed = reader.integer(document["rng_seed"], "rng_seed")
    values: dict[str, Any] = {
        "world": _read_world(reader, document["world"], rng_seed),
        "start": reader.point(document["start"], "start"),
        "target": reader.point(document["target"], "target"),
        "rng_seed": rng_seed,
    }
    defaults = {item.name: item.default for item in fields(ScenarioConfig) if item.default is not MISSING}
    for key in SCALAR_FIELDS:
        if key not in document or key == "rng_seed":
            continue
        if key == "case" and isinstance(document[key], int) and not isinstance(document[key], bool):
            values[key] = str(document[key])
        else:
            values[key] = reader.coerce(document[key], defaults[key], key)

    limits = reader.dataclass(RobotLimits, document.get("limits", {}), "limits")
    tube = reader.dataclass(TubeParameters, document.get("tube", {}), "tube")
    values["tmpc"] = reader.dataclass(TmpcConfig, document.get("tmpc", {}), "tmpc", {"limits": limits, "tube": tube})
    for key in ("planner", "search", "hlrrt", "harness"):
        values[key] = reader.dataclass(BLOCKS[key], document.get(key, {}), key)
    apf_block = reader.object(document.get("apf", {}), "apf")
    if "preset" in apf_block:
        if len(apf_block) > 1:
            raise reader.error("apf.preset", "a preset cannot be combined with explicit values")
        try:
            values["apf"] = apf_preset(apf_block["preset"])
        except InvalidApfParamsError as error:
            raise reader.error("apf.preset", str(error)) from error
    else:
        values["apf"] = reader.dataclass(ApfParams, apf_block, "apf")
    return ScenarioConfig(**values)


def load_scenario(path: str | Path) -> ScenarioConfig:
    """Reads and validates a scenario file; see parse_scenario for the errors raised."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as error:
        raise ScenarioFileError("Cannot read scenario file " + str(path) + ": " + str(error)) from error
    config = parse_scenario(text)
    logger.debug("Loaded scenario %s from %s", config.scenario_id, path)
    return config


def _dataclass_document(instance, skip: tuple[str, ...] = ()) -> dict:
    document = {}
    for item in fields(instance):
        if item.name in skip:
            continue
        value = getattr(instance, item.name)
        document[item.name] = list(value) if isinstance(value, tuple) else value
    return document


def scenario_document(config: ScenarioConfig) -> dict:
    """JSON-ready document that parse_scenario turns back into an equal config."""
    world = config.world
    return {
        "schema_version": SCHEMA_VERSION,
        "scenario_id": config.scenario_id,
        "case": config.case,
        "reconstruction": config.reconstruction,
        "rng_seed": config.rng_seed,
        "start": [config.start.x, config.start.y],
        "target": [config.target.x, config.target.y],
        "start_heading": config.start_heading,
        "controller": config.controller,
        "setup": config.setup,
        "budget_mode": config.budget_mode,
        "decision_budget": config.decision_budget,
        "max_mission_time": config.max_mission_time,
        "world": {
            "arena": [world.arena_width, world.arena_height],
            **{key: getattr(world, key) for key in WORLD_SCALARS},
            "static_obstacles": [
                {"center": [disc.center.x, disc.center.y], "radius": disc.radius} for disc in world.static_obstacles
            ],
            "dynamic_obstacles": [
                {
                    "position": [obstacle.position.x, obstacle.position.y],
                    "velocity": [obstacle.velocity.x, obstacle.velocity.y],
                    "attraction": [obstacle.attraction.x, obstacle.attraction.y],
                    "alpha": obstacle.alpha,
                    "beta": obstacle.beta,
                }
                for obstacle in world.dynamic_obstacles
            ],
        },
        "limits": _dataclass_document(config.tmpc.limits),
        "tube": _dataclass_document(config.tmpc.tube),
        "tmpc": _dataclass_document(config.tmpc, skip=("limits", "tube")),
        "planner": _dataclass_document(config.planner),
        "search": _dataclass_document(config.search),
        "hlrrt": _dataclass_document(config.hlrrt),
        "apf": _dataclass_document(config.apf),
        "harness": _dataclass_document(config.harness),
    }


def emit_scenario(config: ScenarioConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(scenario_document(config), indent=2) + "\n", encoding="utf-8")
    return path


def trace_file_name(metrics: RunMetrics) -> str:
    parts = (metrics.scenario_id or "scenario", metrics.controller, metrics.setup, str(metrics.seed))
    return "_".join(parts) + ".parquet"


def emit_results(results: Sequence[tuple[RunMetrics, RunTrace | None]], directory: str | Path) -> Path:
    """
    Writes summary.parquet with one row per run and traces/<run>.parquet for every run that carries a trace.

    Returns
    -------
    Path
        The summary file.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    summary_path = directory / "summary.parquet"
    summary_frame([metrics for metrics, _ in results]).to_parquet(summary_path, index=False)
    for metrics, trace in results:
        if trace is None or len(trace) == 0:
            continue
        traces = directory / "traces"
        traces.mkdir(exist_ok=True)
        trace.to_frame().to_parquet(traces / trace_file_name(metrics))
    logger.info("Wrote %d results to %s", len(results), directory)
    return summary_path


def load_summary(paths: Sequence[str | Path]) -> list[RunMetrics]:
    """Reads summary files back into metrics; per-step traces are not part of the summary."""
    frames = []
    for path in paths:
        try:
            frames.append(pd.read_parquet(path))
        except (OSError, ValueError) as error:
            raise ScenarioFileError("Cannot read result file " + str(path) + ": " + str(error)) from error
    results = []
    for row in pd.concat(frames, ignore_index=True).itertuples(index=False):
        results.append(
            RunMetrics(
                success=bool(row.success),
                failure_cause=FailureCause(row.failure_cause),
                path_length=float(row.path_length),
                mission_time=float(row.mission_time),
                replan_count=int(row.replan_count),
                infeasibility_signals=int(row.infeasibility_signals),
                plan_count=int(row.plan_count),
                controller=row.controller,
                setup=row.setup,
                scenario_id=row.scenario_id,
                case=row.case,
                seed=int(row.seed),
            )
        )
    return results


def _far_from(point: Vec2, others: Sequence[Vec2], distance: float) -> bool:
    return all(point.distance_to(other) > distance for other in others)


def generate_scenario(case: int, index: int, seed: int = 0, controller: str = "htmpc") -> ScenarioConfig:
    """
    Reconstructed scenario of the given case in a 14 m x 14 m arena.

    Case 1 has 6 static and 5 dynamic obstacles spread over the arena. Case 2 has 8 static and 8 dynamic obstacles
    whose attraction points lie on the straight start-target corridor, so that the tracking problem becomes
    temporarily infeasible. Obstacles start 2-3 m from their attraction points per axis with velocities in
    [-0.3, 0.3] m/s.
    """
    if case not in (1, 2):
        raise UnknownCaseError("Unknown case: " + str(case))
    rng = np.random.default_rng([seed, case, index])
    world = WorldConfig()
    start = Vec2(1.0, float(rng.uniform(1.0, 3.0)))
    target = Vec2(13.0, float(rng.uniform(11.0, 13.0)))
    static_count, dynamic_count = (6, 5) if case == 1 else (8, 8)
    keep_out = world.collision_distance + 1.0

    statics: list[Disc] = []
    while len(statics) < static_count:
        center = Vec2(*rng.uniform(3.0, 11.0, size=2))
        if _far_from(center, [start, target], keep_out) and _far_from(center, [d.center for d in statics], 1.0):
            statics.append(Disc(center, world.obstacle_radius))

    sampling = ObstacleSampling()
    dynamics: list[DynamicObstacleState] = []
    corridor = target - start
    while len(dynamics) < dynamic_count:
        if case == 1:
            attraction = Vec2(*rng.uniform(3.0, 11.0, size=2))
        else:
            attraction = start + corridor * float(rng.uniform(0.25, 0.75)) + corridor.perpendicular().unit() * float(
                rng.uniform(-0.5, 0.5)
            )
        obstacle = sampling.draw(attraction, rng)
        inside = 0.0 < obstacle.position.x < world.arena_width and 0.0 < obstacle.position.y < world.arena_height
        if inside and _far_from(obstacle.position, [start, target], keep_out):
            dynamics.append(obstacle)

    return ScenarioConfig(
        world=WorldConfig(static_obstacles=tuple(statics), dynamic_obstacles=tuple(dynamics), rng_seed=seed),
        start=start,
        target=target,
        rng_seed=seed,
        controller=controller,
        case=str(case),
        scenario_id="case" + str(case) + "-" + str(index).zfill(2),
        reconstruction=True,
    )


def crushing_scenario(seed: int = 0, controller: str = "htmpc") -> ScenarioConfig:
    """Three dynamic obstacles drawn toward the robot from ahead and both sides, no static obstacles."""
    start, target = Vec2(7.0, 2.0), Vec2(7.0, 12.0)
    limits = RobotLimits()
    dynamics = []
    for position in (Vec2(7.0, 5.0), Vec2(4.5, 3.5), Vec2(9.5, 3.5)):
        velocity = (start - position).unit() * 0.3
        provisional = DynamicObstacleState(position, velocity, start, 1.0, 1.0)
        alpha, beta = compute_multipliers(provisional, limits.velocity_component_bounds(), 0.5)
        dynamics.append(DynamicObstacleState(position, velocity, start, alpha, beta))
    return ScenarioConfig(
        world=WorldConfig(dynamic_obstacles=tuple(dynamics), rng_seed=seed),
        start=start,
        target=target,
        rng_seed=seed,
        controller=controller,
        case="crushing",
        scenario_id="crushing",
        reconstruction=True,
    )


def generate_case_directory(case: int, count: int, seed: int, directory: str | Path) -> list[Path]:
    """Writes `count` reconstructed scenarios of a case as case<case>-<index>.json files."""
    paths = []
    for index in range(1, count + 1):
        config = generate_scenario(case, index, seed)
        paths.append(emit_scenario(config, Path(directory) / (config.scenario_id + ".json")))
    logger.info("Generated %d case-%d scenarios in %s", count, case, directory)
    return paths

