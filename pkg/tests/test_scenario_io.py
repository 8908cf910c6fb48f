import json
import math

import pytest

from robot_navigation_simulation.baselines import apf_preset
from robot_navigation_simulation.scenario_harness import (
    FailureCause,
    RunMetrics,
    RunTrace,
    TraceRecord,
)
from robot_navigation_simulation.scenario_io import (
    ScenarioFileError,
    ScenarioSchemaError,
    UnknownCaseError,
    crushing_scenario,
    emit_results,
    emit_scenario,
    generate_case_directory,
    generate_scenario,
    line_of,
    load_scenario,
    load_summary,
    parse_scenario,
    scenario_document,
)

# test data
case1_canonical = "tests/data/scenarios/case1_canonical.json"
missing_rng_seed = "tests/data/scenarios/missing_rng_seed.json"
missing_alpha = "tests/data/scenarios/missing_alpha.json"


def _minimal(**overrides):
    document = {
        "schema_version": 1,
        "scenario_id": "minimal",
        "rng_seed": 1,
        "start": [1.0, 1.0],
        "target": [5.0, 1.0],
        "world": {"static_obstacles": [], "dynamic_obstacles": []},
    }
    document.update(overrides)
    return json.dumps(document, indent=2)


def _metrics(scenario_id, success=True, path_length=10.0):
    return RunMetrics(
        success=success,
        failure_cause=FailureCause.NONE if success else FailureCause.COLLISION,
        path_length=path_length,
        mission_time=path_length / 0.8,
        replan_count=2,
        infeasibility_signals=2,
        plan_count=40,
        controller="htmpc",
        setup="budgeted",
        scenario_id=scenario_id,
        case="1",
        seed=7,
    )


def test_load_canonical_case():
    config = load_scenario(case1_canonical)
    config.validate()
    assert len(config.world.static_obstacles) == 6
    assert len(config.world.dynamic_obstacles) == 5
    assert config.world.rng_seed == config.rng_seed == 42
    assert config.world.static_obstacles[5].radius == 0.3
    assert config.apf == apf_preset("retuned")
    assert config.budget == 0.15
    assert config.case == "1"
    assert config.reconstruction


def test_missing_seed_names_field_and_line():
    with pytest.raises(ScenarioSchemaError) as error:
        load_scenario(missing_rng_seed)
    assert error.value.field_path == "rng_seed"
    assert error.value.line == 1


def test_missing_nested_field_points_to_enclosing_object():
    with pytest.raises(ScenarioSchemaError) as error:
        load_scenario(missing_alpha)
    assert error.value.field_path == "world.dynamic_obstacles[1].alpha"
    assert error.value.line == 11
    assert "line 11" in str(error.value)


def test_round_trip(tmp_path):
    config = load_scenario(case1_canonical)
    path = emit_scenario(config, tmp_path / "nested" / "copy.json")
    assert load_scenario(path) == config


def test_generated_scenario_round_trip():
    config = generate_scenario(2, 4, seed=11, controller="hlrrt")
    assert parse_scenario(json.dumps(scenario_document(config))) == config


@pytest.mark.parametrize(
    "document, field_path",
    [
        (_minimal(rng_seed="seven"), "rng_seed"),
        (_minimal(start=[1.0]), "start"),
        (_minimal(colour="red"), "colour"),
        (_minimal(schema_version=2), "schema_version"),
        (_minimal(tmpc={"horizon": 2.5}), "tmpc.horizon"),
        (_minimal(apf={"preset": "retuned", "repulsion_gain": 1.0}), "apf.preset"),
        (_minimal(apf={"preset": "gentle"}), "apf.preset"),
        (_minimal(world={"static_obstacles": [{"radius": 0.3}], "dynamic_obstacles": []}),
         "world.static_obstacles[0].center"),
        (_minimal(world={"static_obstacles": [], "dynamic_obstacles": [], "gravity": 9.81}), "world.gravity"),
    ],
)
def test_schema_errors(document, field_path):
    with pytest.raises(ScenarioSchemaError) as error:
        parse_scenario(document)
    assert error.value.field_path == field_path


def test_invalid_json():
    with pytest.raises(ScenarioFileError):
        parse_scenario('{"schema_version": 1,')


def test_missing_file(tmp_path):
    with pytest.raises(ScenarioFileError):
        load_scenario(tmp_path / "absent.json")


def test_optional_blocks_fall_back_to_defaults():
    config = parse_scenario(_minimal(case=2, limits={"v_max": 0.8}))
    assert config.case == "2"
    assert config.tmpc.limits.v_max == 0.8
    assert config.tmpc.horizon == 5
    assert config.start_heading is None
    assert config.heading == 0.0


def test_line_of_nested_paths():
    text = '{\n  "world": {\n    "static_obstacles": [\n      {"a": 1},\n      {"b": 2}\n    ]\n  }\n}'
    assert line_of(text, "world.static_obstacles[1].center") == 5
    assert line_of(text, "world.arena") == 2
    assert line_of(text, "rng_seed") == 1


@pytest.mark.parametrize("case, counts", [(1, (6, 5)), (2, (8, 8))])
def test_generated_cases(case, counts):
    for index in range(1, 4):
        config = generate_scenario(case, index, seed=5)
        config.validate()
        assert (len(config.world.static_obstacles), len(config.world.dynamic_obstacles)) == counts
        assert config.scenario_id == "case" + str(case) + "-0" + str(index)
        for obstacle in config.world.dynamic_obstacles:
            offset = obstacle.position - obstacle.attraction
            assert 2.0 <= abs(offset.x) <= 3.0 and 2.0 <= abs(offset.y) <= 3.0
            assert max(abs(obstacle.velocity.x), abs(obstacle.velocity.y)) <= 0.3


def test_case_two_attractions_lie_on_corridor():
    config = generate_scenario(2, 1, seed=3)
    corridor = config.target - config.start
    normal = corridor.perpendicular().unit()
    for obstacle in config.world.dynamic_obstacles:
        assert abs((obstacle.attraction - config.start).dot(normal)) <= 0.5 + 1e-9


def test_generation_is_seeded():
    assert generate_scenario(1, 2, seed=9) == generate_scenario(1, 2, seed=9)
    assert generate_scenario(1, 2, seed=9) != generate_scenario(1, 2, seed=10)
    with pytest.raises(UnknownCaseError):
        generate_scenario(3, 1)


def test_crushing_scenario_closes_in():
    config = crushing_scenario(seed=4, controller="hlrrt")
    config.validate()
    assert len(config.world.dynamic_obstacles) == 3
    assert not config.world.static_obstacles
    for obstacle in config.world.dynamic_obstacles:
        toward = (config.start - obstacle.position).unit()
        assert obstacle.attraction == config.start
        assert obstacle.velocity.dot(toward) == pytest.approx(0.3)


def test_generate_case_directory(tmp_path):
    paths = generate_case_directory(1, 3, 2, tmp_path)
    assert [path.name for path in paths] == ["case1-01.json", "case1-02.json", "case1-03.json"]
    assert load_scenario(paths[1]) == generate_scenario(1, 2, 2)


def test_results_round_trip(tmp_path):
    trace = RunTrace(
        [
            TraceRecord(0.1, 1.0, 1.0, 0.0, 0.5, 0.0, 2.0, 0.01, "abc", diagnostics={"evaluations": 12}),
            TraceRecord(0.2, 1.05, 1.0, 0.0, 0.5, 0.0, 1.9, 0.01, "abd", diagnostics={"evaluations": 9}),
        ]
    )
    results = [(_metrics("b", path_length=12.0), trace), (_metrics("a", success=False), None)]
    summary = emit_results(results, tmp_path)
    assert summary.exists()
    assert len(list((tmp_path / "traces").glob("*.parquet"))) == 1
    loaded = load_summary([summary])
    assert [metrics.scenario_id for metrics in loaded] == ["b", "a"]
    assert loaded[0].path_length == 12.0
    assert loaded[1].failure_cause == FailureCause.COLLISION
    assert loaded[0].replan_count == 2
    assert math.isclose(loaded[0].mission_time, 15.0)


def test_load_summary_missing_file(tmp_path):
    with pytest.raises(ScenarioFileError):
        load_summary([tmp_path / "summary.parquet"])
