import json

import pytest
import yaml

from fedverify import cli
from fedverify import data as ds

SMALL = {
    "data": {"class_count": 4, "feature_dim": 16, "per_class": 60, "test_per_class": 20},
    "model": {"hidden": [8]},
    "fl": {"n_total": 6, "n_select": 3, "total_rounds": 14},
    "timeline": {"T_enabled": 3, "t_m": 5, "t_u": 7, "t_leave": 12, "T_total": 14},
    "marking": {"kind": "EM", "ft_iters": 60},
    "unlearn": {"method": "RT"},
    "check": {"record_influence": False, "correlation_window": 3},
}


@pytest.fixture
def config_file(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(yaml.safe_dump(SMALL))
    return p


def test_missing_config_exit_1(tmp_path, capsys):
    missing = tmp_path / "absent.yaml"
    assert cli.main(["experiment", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_unknown_flag_exit_1(config_file, capsys):
    assert cli.main(["experiment", str(config_file), "--bogus"]) == 1
    assert "--bogus" in capsys.readouterr().err


def test_unknown_key_exit_1(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("fl: {rounds: 3}\n")
    assert cli.main(["experiment", str(p)]) == 1
    assert "rounds" in capsys.readouterr().err


def test_infeasible_marking_exit_3(tmp_path, capsys):
    d = dict(SMALL, marking={"kind": "BF", "bf_min_markers": 10_000})
    p = tmp_path / "bf.yaml"
    p.write_text(yaml.safe_dump(d))
    assert cli.main(["experiment", str(p), "--out", str(tmp_path / "o")]) == 3
    assert "infeasible" in capsys.readouterr().err
    # the report on that log also exits 3
    assert cli.main(["report", str(tmp_path / "o" / "experiment.summary.json")]) == 3


def test_gen_data(tmp_path, capsys):
    out = tmp_path / "d"
    assert cli.main(["gen-data", "--out", str(out), "--classes", "3", "--dim", "9",
                     "--per-class", "5", "--test-per-class", "2", "--seed", "1"]) == 0
    train = ds.load_dataset(out / "train.vfds")
    test = ds.load_dataset(out / "test.vfds")
    assert len(train) == 15 and len(test) == 6 and train.feature_dim == 9
    assert "per-class min/max 5/5" in capsys.readouterr().out


def test_gen_data_idx_needs_both_files(tmp_path):
    assert cli.main(["gen-data", "--out", str(tmp_path), "--idx-images", "x"]) == 1


def test_train(config_file, tmp_path, capsys):
    out = tmp_path / "t"
    assert cli.main(["train", str(config_file), "--out", str(out)]) == 0
    lines = (out / "train.csv").read_text().splitlines()
    assert lines[0] == "round,test_accuracy,test_loss" and len(lines) == 15
    assert (out / "history.bin").exists()
    assert "final test accuracy" in capsys.readouterr().out


def test_experiment_reproducible_and_report(config_file, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["experiment", str(config_file), "--out", str(a)]) == 0
    assert cli.main(["experiment", str(config_file), "--out", str(b)]) == 0
    for name in ("experiment.summary.json", "experiment.jsonl", "experiment.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    capsys.readouterr()

    assert cli.main(["report", str(a / "experiment.summary.json"), "--json"]) == 0
    out = capsys.readouterr().out
    for key in ("metric_diff", "verify_decision", "correlation_r"):
        assert key in out
    summary = json.loads(out.strip().splitlines()[-1])
    assert summary["verify_decision"] == "assured_privacy"


def test_experiment_method_and_seed_overrides(config_file, tmp_path):
    out = tmp_path / "nt"
    assert cli.main(["experiment", str(config_file), "--method", "NT", "--seed", "2",
                     "--out", str(out)]) == 0
    body = json.loads((out / "experiment.summary.json").read_text())
    assert body["config"]["seed"] == 2 and body["config"]["fl"]["seed"] == 2
    assert body["summary"]["method"] == "NT"
    assert body["summary"]["verify_decision"] == "distrust"


def test_bad_method_exit_1(config_file):
    assert cli.main(["experiment", str(config_file), "--method", "XYZ"]) == 1


def test_sweep_csv(config_file, tmp_path, capsys):
    out = tmp_path / "s"
    assert cli.main(["sweep", str(config_file), "--axis", "n_select", "--values", "2,3",
                     "--out", str(out)]) == 0
    lines = (out / "sweep_n_select.csv").read_text().splitlines()
    assert lines[0] == "n_select,status,metric,baseline,at_t_u,metric_diff,verify_decision"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["2", "3"]
    assert (out / "n_select_2.summary.json").exists()
    assert capsys.readouterr().out.splitlines() == lines


def test_sweep_bad_axis_and_values(config_file, tmp_path):
    assert cli.main(["sweep", str(config_file), "--axis", "colour", "--values", "1",
                     "--out", str(tmp_path)]) == 1
    assert cli.main(["sweep", str(config_file), "--axis", "n_select", "--values", "a",
                     "--out", str(tmp_path)]) == 1


def test_report_missing_log(tmp_path):
    assert cli.main(["report", str(tmp_path / "none.summary.json")]) == 1


def test_no_command_exit_1():
    assert cli.main([]) == 1
