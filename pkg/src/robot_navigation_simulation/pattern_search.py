"""
Derivative-free bound-constrained minimizer: multi-start generalized pattern search.

Every start runs a coordinate poll with one mesh size per coordinate. A coordinate whose move is accepted doubles its
mesh size, capped at the bound range, and a coordinate whose poll does not improve the incumbent halves it. When
several coordinates improve in the same iteration, their combined move is tried as well. Objective functions are
evaluated in batches: `evaluate` receives an (m, n) array of points and returns m values, which keeps the penalized
MPC objective vectorized.

All starts are polled in lockstep, so one call of `evaluate` covers one iteration of every live start. A start stops
when every mesh size is below the mesh tolerance (converged) or at the iteration cap; all starts stop when the next
batch no longer fits the evaluation or wall-clock budget.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

logger = logging.getLogger(__name__)


class InvalidStartError(Exception):
    """Error raised when no start point lies within the bounds"""


@dataclass(frozen=True)
class SearchSettings:
    """Solver settings surfaced in scenario files."""

    start_count: int = 4
    initial_step: float = 0.1
    mesh_tolerance: float = 1e-6
    max_iterations: int = 200
    max_evaluations: int = 20000
    seconds_per_evaluation: float = 5e-5
    penalty_weight: float = 1e3


@dataclass
class SearchProblem:
    """
    Bound-constrained minimization problem.

    Parameters
    ----------
    dimension : int
        Number of decision variables.
    evaluate : callable
        Maps an (m, dimension) array to m objective-plus-penalty values.
    lower, upper : np.ndarray
        Finite bounds of the decision variables.
    starts : list of np.ndarray
        Start points; those outside the bounds are ignored.
    budget : float or None
        Wall-clock budget in seconds, None for no time limit.
    max_iterations : int
        Iteration cap per start.
    max_evaluations : int or None
        Evaluation cap over all starts, None for no cap. Used as the deterministic budget.
    initial_step : float
        Initial mesh size as a fraction of the bound range.
    mesh_tolerance : float
        Mesh size below which a coordinate is considered converged.
    """

    dimension: int
    evaluate: Callable[[np.ndarray], np.ndarray]
    lower: np.ndarray
    upper: np.ndarray
    starts: list[np.ndarray]
    budget: float | None = None
    max_iterations: int = 200
    max_evaluations: int | None = None
    initial_step: float = 0.1
    mesh_tolerance: float = 1e-6
    clock: Callable[[], float] = field(default=time.perf_counter, repr=False)


@dataclass
class SearchResult:
    best: np.ndarray
    best_value: float
    evaluations: int
    converged: bool
    elapsed: float
    start_index: int = 0
    iterations: int = 0
    history: list[float] = field(default_factory=list)


def _in_bounds(point: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> bool:
    return bool(np.all(np.isfinite(point)) and np.all(point >= lower) and np.all(point <= upper))


class _Budget:
    """Shared evaluation and time budget of one pattern_search call."""

    def __init__(self, problem: SearchProblem):
        self.clock = problem.clock
        self.started = problem.clock()
        self.deadline = None if problem.budget is None else self.started + problem.budget
        self.max_evaluations = problem.max_evaluations
        self.evaluations = 0

    def remaining_evaluations(self) -> float:
        if self.max_evaluations is None:
            return np.inf
        return max(self.max_evaluations - self.evaluations, 0)

    def remaining_time(self) -> float:
        if self.deadline is None:
            return np.inf
        return max(self.deadline - self.clock(), 0.0)


@dataclass
class _StartState:
    """Incumbent and mesh of one start."""

    index: int
    point: np.ndarray
    value: float
    steps: np.ndarray
    live: bool = True
    converged: bool = False
    iterations: int = 0


def _poll_points(state: _StartState, active: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """Two poll points per active coordinate, the positive step first, clipped to the bounds."""
    candidates = np.repeat(state.point[None, :], 2 * active.size, axis=0)
    rows = np.arange(active.size)
    candidates[2 * rows, active] = np.minimum(state.point[active] + state.steps[active], upper[active])
    candidates[2 * rows + 1, active] = np.maximum(state.point[active] - state.steps[active], lower[active])
    return candidates


def _poll_starts(problem: SearchProblem, states: list[_StartState], budget: _Budget, history: list[float]) -> None:
    """
    Polls all live starts in lockstep until every start has converged, hit its iteration cap, or the next batch
    no longer fits the budget. One iteration evaluates the polls of all live starts as a single batch.
    """
    lower, upper = problem.lower, problem.upper
    span = upper - lower
    while True:
        polls = []
        for state in states:
            if not state.live:
                continue
            active = np.flatnonzero(state.steps >= problem.mesh_tolerance)
            if active.size == 0:
                state.live, state.converged = False, True
            elif state.iterations >= problem.max_iterations:
                state.live = False
            else:
                polls.append((state, active))
        if not polls:
            return
        size = sum(2 * active.size for _, active in polls)
        if budget.remaining_time() <= 0.0 or size > budget.remaining_evaluations():
            return

        candidates = np.vstack([_poll_points(state, active, lower, upper) for state, active in polls])
        values = np.asarray(problem.evaluate(candidates), dtype=float)
        budget.evaluations += len(candidates)

        outcomes = []
        combined_points = []
        offset = 0
        for state, active in polls:
            rows = np.arange(active.size)
            pair_values = values[offset : offset + 2 * active.size].reshape(-1, 2)
            pair_choice = np.argmin(pair_values, axis=1)
            moves = candidates[offset + 2 * rows + pair_choice, active]
            offset += 2 * active.size
            pair_best = pair_values[rows, pair_choice]
            improved = pair_best < state.value
            combined_slot = None
            if np.count_nonzero(improved) >= 2:
                combined = state.point.copy()
                combined[active[improved]] = moves[improved]
                combined_slot = len(combined_points)
                combined_points.append(combined)
            outcomes.append((state, active, improved, moves, pair_best, combined_slot))

        combined_values = None
        if combined_points and len(combined_points) <= budget.remaining_evaluations():
            combined_values = np.asarray(problem.evaluate(np.array(combined_points)), dtype=float)
            budget.evaluations += len(combined_points)

        for state, active, improved, moves, pair_best, combined_slot in outcomes:
            success = np.zeros_like(state.steps, dtype=bool)
            if combined_slot is not None and combined_values is not None:
                combined_value = float(combined_values[combined_slot])
                if combined_value < pair_best[improved].min():
                    state.point, state.value = combined_points[combined_slot], combined_value
                    success[active[improved]] = True
            if not success.any() and improved.any():
                winner = int(np.argmin(pair_best))
                state.point = state.point.copy()
                state.point[active[winner]] = moves[winner]
                state.value = float(pair_best[winner])
                success[active[winner]] = True

            failed = np.zeros_like(success)
            failed[active[~improved]] = True
            state.steps[failed] *= 0.5
            state.steps[success] = np.minimum(state.steps[success] * 2.0, span[success])
            state.iterations += 1
        history.append(min(history[-1], min(state.value for state in states)))


def pattern_search(problem: SearchProblem) -> SearchResult:
    """
    Minimizes the problem from every valid start and returns the best point found.

    The starts are evaluated first, then polled in lockstep from the shared budget. The result with the lowest value
    wins; ties go to the lowest start index. With a zero budget the best start is returned unchanged and converged
    is False.

    Raises
    ------
    InvalidStartError
        If none of the starts lies within the bounds.
    """
    lower = np.asarray(problem.lower, dtype=float)
    upper = np.asarray(problem.upper, dtype=float)
    problem.lower, problem.upper = lower, upper
    starts = [np.asarray(start, dtype=float) for start in problem.starts]
    valid = [index for index, start in enumerate(starts) if _in_bounds(start, lower, upper)]
    if not valid:
        raise InvalidStartError("None of the " + str(len(starts)) + " start points lies within the bounds!")

    budget = _Budget(problem)
    start_values = np.asarray(problem.evaluate(np.array([starts[index] for index in valid])), dtype=float)
    budget.evaluations += len(valid)
    states = [
        _StartState(index, starts[index].copy(), float(value), problem.initial_step * (upper - lower))
        for index, value in zip(valid, start_values)
    ]
    history = [float(np.min(start_values))]

    budget_is_zero = problem.budget == 0 or problem.max_evaluations == 0
    if not budget_is_zero:
        _poll_starts(problem, states, budget, history)

    best = states[0]
    for state in states[1:]:
        if state.value < best.value:
            best = state
    for state in states:
        logger.debug(
            "Start %d finished after %d iterations with value %.6g", state.index, state.iterations, state.value
        )
    return SearchResult(
        best=best.point.copy(),
        best_value=best.value,
        evaluations=budget.evaluations,
        converged=best.converged,
        elapsed=problem.clock() - budget.started,
        start_index=best.index,
        iterations=sum(state.iterations for state in states),
        history=history,
    )


def make_starts(
    warm_start: np.ndarray | None,
    reference: np.ndarray,
    count: int,
    rng: np.random.Generator,
    lower: np.ndarray,
    upper: np.ndarray,
) -> list[np.ndarray]:
    """
    Start points for the multi-start search.

    The shifted previous solution comes first when present, then the reference, then uniform samples within the
    bounds drawn from `rng`. Every start is clipped to the bounds.
    """
    starts = []
    if warm_start is not None:
        starts.append(np.clip(np.asarray(warm_start, dtype=float), lower, upper))
    if len(starts) < count:
        starts.append(np.clip(np.asarray(reference, dtype=float), lower, upper))
    while len(starts) < count:
        starts.append(rng.uniform(lower, upper))
    return starts[:count]
