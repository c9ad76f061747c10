import dataclasses

import pytest
import yaml
from hypothesis import given, settings, strategies as st

from fedverify.config import (AttackConfig, CheckConfig, ExperimentConfig, Timeline,
                              config_from_dict, dump_config, load_config)
from fedverify.errors import ConfigError


def test_defaults_are_consistent():
    cfg = ExperimentConfig()
    assert cfg.fl.total_rounds == cfg.timeline.T_total
    tl = cfg.timeline
    assert 0 < tl.T_enabled <= tl.t_m < tl.t_u < tl.t_leave <= tl.T_total


def test_yaml_load(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(
        "seed: 4\n"
        "model: {hidden: [16, 8]}\n"
        "marking: {kind: BN, trigger: {size: 3, transparency: 0.5}}\n"
        "unlearn: {method: IGS}\n"
    )
    cfg = load_config(p)
    assert cfg.seed == 4 and cfg.fl.seed == 4
    assert cfg.model.hidden == (16, 8)
    assert cfg.marking.kind == "BN"
    assert cfg.marking.trigger.size == 3 and cfg.marking.trigger.transparency == 0.5
    assert cfg.unlearn.method == "IGS"


def test_dump_load_round_trip(tmp_path):
    cfg = config_from_dict({"seed": 9, "marking": {"kind": "ME"}, "check": {"thresholds": {"loss": 0.2}}})
    p = tmp_path / "c.yaml"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg
    assert dump_config(load_config(p)) == dump_config(cfg)


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("")
    assert load_config(p) == ExperimentConfig()


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="nope.yaml"):
        load_config(tmp_path / "nope.yaml")


def test_bad_yaml(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: [1,\n")
    with pytest.raises(ConfigError):
        load_config(p)


@pytest.mark.parametrize("d", [
    {"colour": 1},
    {"fl": {"rounds": 3}},
    {"marking": {"trigger": {"shape": "x"}}},
    {"fl": [1, 2]},
    [1, 2],
])
def test_unknown_or_malformed_keys(d):
    with pytest.raises(ConfigError):
        config_from_dict(d)


def test_unknown_method_and_kind():
    with pytest.raises(ConfigError):
        config_from_dict({"unlearn": {"method": "XYZ"}})
    with pytest.raises(ConfigError):
        config_from_dict({"marking": {"kind": "XYZ"}})


def test_total_rounds_must_match_timeline():
    with pytest.raises(ConfigError, match="T_total"):
        config_from_dict({"fl": {"total_rounds": 50}})


def test_leaver_out_of_range():
    with pytest.raises(ConfigError):
        config_from_dict({"leaver": 100})
    with pytest.raises(ConfigError):
        config_from_dict({"leaver": -1})


def test_with_seed_propagates():
    cfg = ExperimentConfig().with_seed(17)
    assert cfg.seed == 17 and cfg.fl.seed == 17


def test_fl_seed_follows_top_level_seed():
    cfg = config_from_dict({"seed": 3, "fl": {"seed": 99}})
    assert cfg.fl.seed == 3


def test_timeline_ordering_examples():
    Timeline(1, 1, 2, 3, 3)
    with pytest.raises(ConfigError):
        Timeline(0, 1, 2, 3, 4)
    with pytest.raises(ConfigError):
        Timeline(1, 2, 2, 3, 4)
    with pytest.raises(ConfigError):
        Timeline(1, 2, 3, 5, 4)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-2, 12), min_size=5, max_size=5))
def test_timeline_accepts_exactly_ordered_tuples(v):
    ok = 0 < v[0] <= v[1] < v[2] < v[3] <= v[4]
    if ok:
        Timeline(*v)
    else:
        with pytest.raises(ConfigError):
            Timeline(*v)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 80), st.integers(0, 80))
def test_attack_capture_precedes_replay(capture, replay):
    if capture < replay:
        AttackConfig(enabled=True, capture_round=capture, replay_round=replay)
    else:
        with pytest.raises(ConfigError):
            AttackConfig(enabled=True, capture_round=capture, replay_round=replay)
    AttackConfig(enabled=False, capture_round=capture, replay_round=replay)


@settings(max_examples=60, deadline=None)
@given(st.floats(-5, 5, allow_nan=False))
def test_check_thresholds_positive(delta):
    if delta > 0:
        assert CheckConfig(thresholds={"loss": delta}).thresholds["loss"] == delta
    else:
        with pytest.raises(ConfigError):
            CheckConfig(thresholds={"loss": delta})


def test_to_dict_is_plain_yaml():
    d = ExperimentConfig().to_dict()
    assert yaml.safe_load(yaml.safe_dump(d)) == d
    assert isinstance(d["model"]["hidden"], list)


def test_config_is_frozen():
    with pytest.raises(dataclasses.FrozenInstanceError):
        ExperimentConfig().seed = 2
