import json

import numpy as np
import pytest
import yaml

from dualcurriculum.cli import run_cli

from conftest import tiny_config_doc


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(yaml.safe_dump(tiny_config_doc(strategies={"names": ["no-curriculum", "loss", "kde"]},
                                                search={"trials": 1})))
    return str(p)


def run(capsys, *argv):
    code = run_cli(list(argv))
    out, err = capsys.readouterr()
    return code, out.strip(), err.strip()


def test_synth_writes_series(config, tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--config", config, "--out", str(tmp_path / "o"))
    assert code == 0 and out == "T=160 C=2"
    lines = (tmp_path / "o" / "series.csv").read_text().splitlines()
    assert lines[0] == "timestamp,ch0,ch1" and len(lines) == 161
    manifest = json.loads((tmp_path / "o" / "manifest_synth.json").read_text())
    assert manifest["seed"] == 42 and manifest["config"]["dataset"][0]["name"] == "tiny"


def test_pipeline_stages(config, tmp_path, capsys):
    out = str(tmp_path / "o")
    assert run(capsys, "windows", "--config", config, "--out", out)[0] == 0
    with np.load(tmp_path / "o" / "windows.npz") as z:
        assert z["train_x"].shape[1:] == (6, 2)
    code, msg, _ = run(capsys, "train-repr", "--config", config, "--out", out)
    assert code == 0 and msg.startswith("epochs=2")
    code, msg, _ = run(capsys, "buckets", "--config", config, "--out", out, "--strategy", "loss", "--k", "4")
    assert code == 0 and "sizes=" in msg
    labels = (tmp_path / "o" / "buckets_loss.csv").read_text().splitlines()[1:]
    assert {line.split(",")[1] for line in labels} == {"1", "2", "3", "4"}
    code, msg, _ = run(capsys, "train-curriculum", "--config", config, "--out", out, "--strategy", "loss",
                       "--schedule", "baby-steps", "--k", "4")
    assert code == 0 and "test_mse=" in msg
    assert (tmp_path / "o" / "stages_loss_baby-steps.csv").exists()


def test_score_is_deterministic(config, tmp_path, capsys):
    out = tmp_path / "o"
    assert run(capsys, "score", "--config", config, "--out", str(out), "--strategy", "kde")[0] == 0
    first = (out / "scores_kde.csv").read_bytes()
    assert run(capsys, "score", "--config", config, "--out", str(out), "--strategy", "kde")[0] == 0
    assert (out / "scores_kde.csv").read_bytes() == first


def test_experiment_and_report(config, tmp_path, capsys):
    out = str(tmp_path / "o")
    code, msg, _ = run(capsys, "experiment", "--config", config, "--out", out)
    assert code == 0 and msg.startswith("cells=6")
    summary = (tmp_path / "o" / "summary.csv").read_bytes()
    code, msg, _ = run(capsys, "report", "--config", config, "--out", out)
    assert code == 0 and msg == "cells=6"
    assert (tmp_path / "o" / "summary.csv").read_bytes() == summary


def test_unknown_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        run_cli(["train-everything"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        run_cli(["synth", "--colour", "blue"])
    assert exc.value.code == 2


def test_invalid_config_exits_1(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("schedule:\n  K: -2\n")
    code, _, err = run(capsys, "synth", "--config", str(p), "--out", str(tmp_path))
    assert code == 1
    assert err.startswith("error:") and "'schedule.K'" in err and len(err.splitlines()) == 1


def test_report_without_results(config, tmp_path, capsys):
    code, _, err = run(capsys, "report", "--config", config, "--out", str(tmp_path / "empty"))
    assert code == 1 and "results.csv" in err


def test_baseline_has_no_scores(config, tmp_path, capsys):
    code, _, err = run(capsys, "score", "--config", config, "--out", str(tmp_path), "--strategy", "no-curriculum")
    assert code == 1 and "no-curriculum" in err
