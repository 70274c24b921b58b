import json

import pytest

from difftraffic.scenario_io import (
    ScenarioFormatError,
    dumps_scenario,
    load_scenario,
    parse_scenario,
    save_scenario,
    scenario_from_dict,
    scenario_to_dict,
)
from difftraffic.scenarios import closed_macro_lane, hybrid_chain, pace_car_scenario, signal_toy


@pytest.mark.parametrize("make", [lambda: hybrid_chain(seed=3), lambda: pace_car_scenario(3, 10),
                                  lambda: signal_toy(0.09, 0.05), lambda: closed_macro_lane(5)])
def test_round_trip(make, tmp_path):
    sc = make()
    text = dumps_scenario(sc)
    back = parse_scenario(text)
    assert back == sc
    assert dumps_scenario(back) == text
    save_scenario(sc, tmp_path / "s.json")
    assert load_scenario(tmp_path / "s.json") == sc


def test_missing_key_is_named():
    doc = scenario_to_dict(hybrid_chain(seed=0))
    del doc["lanes"][0]["dx"]
    with pytest.raises(ScenarioFormatError) as ei:
        scenario_from_dict(doc)
    assert ei.value.key == "lanes[0].dx"
    assert "lanes[0].dx" in str(ei.value)


def test_missing_lanes():
    with pytest.raises(ScenarioFormatError) as ei:
        scenario_from_dict({"config": {}})
    assert ei.value.key == "lanes"


def test_malformed_json_reports_position():
    text = dumps_scenario(closed_macro_lane(3))
    bad = text.replace('"lanes"', '"lanes" ,', 1)
    with pytest.raises(ScenarioFormatError) as ei:
        parse_scenario(bad)
    assert str(ei.value).startswith("line ")
    assert "column" in str(ei.value)


def test_unknown_key_rejected():
    doc = scenario_to_dict(closed_macro_lane(3))
    doc["lanes"][0]["speed_limit"] = 3
    with pytest.raises(ScenarioFormatError) as ei:
        scenario_from_dict(doc)
    assert "speed_limit" in ei.value.key


def test_bad_number_and_boundary():
    doc = scenario_to_dict(closed_macro_lane(3))
    doc["lanes"][0]["rho"][1] = "dense"
    with pytest.raises(ScenarioFormatError):
        scenario_from_dict(doc)
    doc = scenario_to_dict(closed_macro_lane(3))
    doc["lanes"][0]["upstream_boundary"] = {"kind": "teleport"}
    with pytest.raises(ScenarioFormatError) as ei:
        scenario_from_dict(doc)
    assert ei.value.key.endswith("upstream_boundary.kind")


def test_file_is_plain_json():
    doc = json.loads(dumps_scenario(hybrid_chain(seed=0)))
    assert [l["kind"] for l in doc["lanes"]] == ["macro", "micro", "macro"]
    assert doc["links"] == [{"upstream": "up", "downstream": "mid"}, {"upstream": "mid", "downstream": "down"}]
