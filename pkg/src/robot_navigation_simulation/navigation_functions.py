"""
This module provides the NavigationExperiment class which loads scenario files, runs them with the configured
controller in one or more worker processes, writes the results and aggregates them into success counts and
path/time statistics.

It also defines custom exceptions for missing inputs.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import pandas as pd

from robot_navigation_simulation.scenario_harness import RunMetrics, RunTrace, ScenarioConfig, aggregate, run_scenario
from robot_navigation_simulation.scenario_io import emit_results, load_scenario

logger = logging.getLogger(__name__)


class NoScenarioProvided(Exception):
    """Raised when no scenario file is provided when it is needed"""


class NoOutputDirectoryProvided(Exception):
    """Raised when no output directory is provided when results are written"""


def _run(config: ScenarioConfig, keep_trace: bool) -> tuple[RunMetrics, RunTrace | None]:
    metrics, trace = run_scenario(config)
    return metrics, trace if keep_trace else None


class NavigationExperiment:
    """
    A class to run navigation experiments over a set of scenario files.

    Methods
    -------
    load_scenarios(self)
        Reads and validates every scenario file.

    run_single(self, index=0, setup=None, seed=None, controller=None)
        Runs one scenario and returns its metrics and trace.

    run_all(self, setup=None, seed=None, controller=None, workers=1, keep_traces=False)
        Runs every scenario, in parallel when workers > 1, and keeps the results ordered by scenario id.

    write_results(self, output_directory=None)
        Writes the summary table and the kept traces.

    aggregate_results(self)
        Success counts and path/time statistics per controller and setup.
    """

    def __init__(self, scenario_paths: Sequence[str | Path], output_directory: str | Path | None = None):
        """
        Parameters
        ----------
        scenario_paths : sequence of str or Path
            Scenario files to run.
        output_directory : str or Path, optional
            Where write_results puts the result files.
        """
        self.scenario_paths = [Path(path) for path in scenario_paths]
        self.output_directory = None if output_directory is None else Path(output_directory)
        self.configs: list[ScenarioConfig] = []
        self.results: list[tuple[RunMetrics, RunTrace | None]] = []

    def load_scenarios(self) -> list[ScenarioConfig]:
        if not self.scenario_paths:
            raise NoScenarioProvided("No scenario file was provided")
        self.configs = [load_scenario(path) for path in self.scenario_paths]
        return self.configs

    def _overridden(self, setup: str | None, seed: int | None, controller: str | None) -> list[ScenarioConfig]:
        if not self.configs:
            self.load_scenarios()
        return [config.with_overrides(setup, seed, controller) for config in self.configs]

    def run_single(
        self, index: int = 0, setup: str | None = None, seed: int | None = None, controller: str | None = None
    ) -> tuple[RunMetrics, RunTrace]:
        config = self._overridden(setup, seed, controller)[index]
        metrics, trace = run_scenario(config)
        self.results.append((metrics, trace))
        return metrics, trace

    def run_all(
        self,
        setup: str | None = None,
        seed: int | None = None,
        controller: str | None = None,
        workers: int = 1,
        keep_traces: bool = False,
    ) -> list[RunMetrics]:
        """
        Runs every loaded scenario. Each run owns its world and random streams, so the outcome does not depend on
        the number of workers; results are ordered by scenario id.
        """
        configs = sorted(self._overridden(setup, seed, controller), key=lambda config: config.scenario_id)
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as executor:
                results = list(executor.map(_run, configs, [keep_traces] * len(configs)))
        else:
            results = [_run(config, keep_traces) for config in configs]
        self.results.extend(results)
        logger.info("Finished %d runs, %d successful", len(results), sum(m.success for m, _ in results))
        return [metrics for metrics, _ in results]

    def write_results(self, output_directory: str | Path | None = None) -> Path:
        directory = output_directory or self.output_directory
        if directory is None:
            raise NoOutputDirectoryProvided("No output directory was provided")
        return emit_results(self.results, directory)

    def aggregate_results(self) -> pd.DataFrame:
        return aggregate([metrics for metrics, _ in self.results])
