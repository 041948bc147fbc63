import io
import json
import sys

import pytest

from fogsense import cli
from fogsense.errors import ConfigError
from fogsense.signalio import load_recording
from fogsense.streaming import recording_feed

SMALL = """
[synth]
n_subjects = 3
task_duration_s = 60
[model]
n_rounds = 20
[run]
seed = 7
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "small.ini").write_text(SMALL)
    assert run("synth", "--config", d / "small.ini", "--out", d / "data") == 0
    return d


def test_synth_writes_manifest(workdir):
    manifest = json.loads((workdir / "data" / "manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["config_hash"] == cli.validate_config(workdir / "small.ini").hash()
    assert {"S01.csv", "S01.json", "S01.annotations.json", "footswitch.json"} <= set(manifest["outputs"])


def test_evaluate_end_to_end_and_rerun_identical(workdir):
    outs = [workdir / "ev1", workdir / "ev2"]
    for out in outs:
        assert run("evaluate", "--config", workdir / "small.ini", "--data", workdir / "data",
                   "--out", out) == 0
    lines = (outs[0] / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("subject,")
    for name in ("metrics.csv", "pr_curves.csv", "folds.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    m0 = json.loads((outs[0] / "manifest.json").read_text())
    m1 = json.loads((outs[1] / "manifest.json").read_text())
    assert m0["outputs"] == m1["outputs"]


def test_train_causal_then_stream(workdir, capsys, monkeypatch):
    model_dir = workdir / "model"
    assert run("train", "--causal", "--config", workdir / "small.ini", "--data", workdir / "data",
               "--out", model_dir) == 0
    rec = load_recording(workdir / "data" / "S01.csv")
    feed = "".join(json.dumps(m) + "\n" for m in recording_feed(rec) if m["t"] < 8.0)
    monkeypatch.setattr(sys, "stdin", io.StringIO(feed))
    capsys.readouterr()
    assert run("stream", "--config", workdir / "small.ini", "--model", model_dir / "model.json",
               "--sidecar", workdir / "data" / "S01.json",
               "--footswitch", workdir / "data" / "footswitch.json") == 0
    events = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert len(events) >= 3
    assert all(0.0 <= e["score"] <= 1.0 for e in events)


def test_missing_config_exit_2(tmp_path, capsys):
    path = tmp_path / "nope.ini"
    assert run("synth", "--config", path, "--out", tmp_path) == 2
    assert str(path) in capsys.readouterr().err


def test_invalid_value_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[evaluate]\nwindow_s = -1\n")
    assert run("synth", "--config", bad, "--out", tmp_path / "o") == 2
    assert "window_s" in capsys.readouterr().err


def test_unknown_command_exit_2(capsys):
    assert run("frobnicate") == 2


def test_missing_data_dir_exit_2(tmp_path):
    assert run("features", "--data", tmp_path / "missing", "--out", tmp_path / "o") == 2


def test_empty_config_gives_defaults(tmp_path):
    p = tmp_path / "empty.ini"
    p.write_text("")
    assert cli.validate_config(p) == cli.default_config()


def test_unknown_key_rejected():
    with pytest.raises(ConfigError):
        cli.parse_config_text("[model]\nn_trees = 3\n")
    with pytest.raises(ConfigError):
        cli.parse_config_text("[bogus]\n")


def test_serialize_round_trip_idempotent(tmp_path):
    cfg = cli.parse_config_text(SMALL)
    text = cfg.serialize()
    again = cli.parse_config_text(text)
    assert again == cfg and again.serialize() == text and again.hash() == cfg.hash()
