"""Outcome patterns of the three controllers on the reconstructed case suites, in iteration-budget mode."""

import collections
from dataclasses import replace

import numpy as np
import pytest

from robot_navigation_simulation.baselines import apf_preset
from robot_navigation_simulation.scenario_harness import BUDGETED, RUN_TO_COMPLETION, FailureCause, run_scenario
from robot_navigation_simulation.scenario_io import crushing_scenario, generate_scenario

SUITE_SIZE = 10


def _suite(case, controller, setup=BUDGETED, seed=0, **overrides):
    results = []
    for index in range(1, SUITE_SIZE + 1):
        config = generate_scenario(case, index, seed, controller).with_overrides(setup=setup)
        metrics, _ = run_scenario(replace(config, **overrides))
        results.append(metrics)
    return results


def _successes(results):
    return sum(metrics.success for metrics in results)


def _separation(config):
    return config.world.robot_radius + config.world.obstacle_radius


def test_wide_influence_apf_livelocks_on_case_one():
    results = _suite(1, "apf", apf=apf_preset("wide-influence"))
    assert _successes(results) <= 2
    causes = collections.Counter(metrics.failure_cause for metrics in results if not metrics.success)
    assert causes.most_common(1)[0][0] == FailureCause.LIVELOCK


@pytest.mark.slow
def test_htmpc_outperforms_hlrrt_on_case_one():
    htmpc = _suite(1, "htmpc")
    hlrrt = _suite(1, "hlrrt")
    assert _successes(htmpc) >= 9
    assert _successes(hlrrt) < _successes(htmpc)


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_successful_htmpc_runs_keep_clear(seed):
    for case in (1, 2):
        for index in range(1, SUITE_SIZE + 1):
            config = generate_scenario(case, index, seed, "htmpc")
            metrics, _ = run_scenario(config)
            if metrics.success:
                assert min(distance for _, distance in metrics.min_distance) > _separation(config)


@pytest.mark.slow
def test_case_two_run_to_completion():
    assert _successes(_suite(2, "htmpc", RUN_TO_COMPLETION)) >= 5
    assert _successes(_suite(2, "hlrrt", RUN_TO_COMPLETION)) <= 1
    assert _successes(_suite(2, "apf", RUN_TO_COMPLETION, apf=apf_preset("wide-influence"))) <= 1


@pytest.mark.slow
def test_htmpc_paths_are_shorter():
    lengths = {}
    for setup in (BUDGETED, RUN_TO_COMPLETION):
        htmpc = _suite(1, "htmpc", setup)
        hlrrt = _suite(1, "hlrrt", setup)
        both = [(a.path_length, b.path_length) for a, b in zip(htmpc, hlrrt) if a.success and b.success]
        assert both
        mean_htmpc, mean_hlrrt = np.mean(both, axis=0)
        assert mean_htmpc <= mean_hlrrt
        lengths[setup] = np.mean([metrics.path_length for metrics in htmpc if metrics.success])
    assert 1.05 <= lengths[BUDGETED] / lengths[RUN_TO_COMPLETION] <= 1.2


@pytest.mark.slow
def test_crushing_scenario():
    seeds = range(5)
    crashes = [run_scenario(crushing_scenario(seed, "hlrrt"))[0].failure_cause for seed in seeds]
    assert sum(cause == FailureCause.COLLISION for cause in crashes) > len(seeds) / 2
    config = crushing_scenario(0, "htmpc")
    metrics, _ = run_scenario(config)
    assert metrics.failure_cause != FailureCause.COLLISION
    assert min(distance for _, distance in metrics.min_distance) > _separation(config)
