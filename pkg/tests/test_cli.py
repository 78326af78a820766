import json

import pytest

from teefl.cli import main
from teefl.metrics import MetricsLog, strip_timing

HONEST = "master_seed: 4\nn_parties: 3\nstopping: {max_rounds: 4}\n"
ATTACK = """master_seed: 4
n_parties: 6
parties: [{id: 1, adversary: {kind: model-replacement, fraction: 1.0, boost: 20}}]
aggregation: {krum_enabled: true, krum_k: 1}
stopping: {max_rounds: 3}
"""


@pytest.fixture
def config_file(tmp_path):
    def make(text):
        p = tmp_path / "exp.yaml"
        p.write_text(text)
        return str(p)
    return make


def test_run_writes_metrics(config_file, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--config", config_file(HONEST), "--out", str(out)]) == 0
    lines = (out / "metrics.jsonl").read_text().splitlines()
    records = [json.loads(x) for x in lines]
    assert [r["type"] for r in records] == ["round"] * 4 + ["summary"]
    assert (out / "transcript.jsonl").exists()
    stdout = capsys.readouterr().out
    assert stdout.count("round ") == 4


def test_invalid_config_exit_2(config_file, tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["run", "--config", config_file("n_parties: 5\naggregation: {krum_enabled: true, krum_k: 2}\n"),
                 "--out", str(out)])
    assert code == 2
    assert not (out / "metrics.jsonl").exists()
    assert "2k+2 < n" in capsys.readouterr().err


def test_runtime_error_exit_3(config_file, tmp_path, capsys):
    text = HONEST + "min_participants: 3\ndropout_schedule: [{round: 2, party_id: 0, when: before-training}]\n"
    assert main(["run", "--config", config_file(text), "--out", str(tmp_path / "o")]) == 3
    assert "protocol" in capsys.readouterr().err


def test_overrides(config_file, tmp_path):
    out = tmp_path / "o"
    assert main(["run", "--config", config_file(HONEST), "--out", str(out), "--rounds", "2",
                 "--seed", "9", "--set", "training.lr=0.2"]) == 0
    log = MetricsLog.read(out / "metrics.jsonl")
    assert len(log.records) == 2


def test_deterministic_modulo_timing(config_file, tmp_path):
    path = config_file(ATTACK)
    for name in ("a", "b"):
        assert main(["run", "--config", path, "--out", str(tmp_path / name)]) == 0
    a = [strip_timing(json.loads(x)) for x in (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()]
    b = [strip_timing(json.loads(x)) for x in (tmp_path / "b" / "metrics.jsonl").read_text().splitlines()]
    assert a == b


def test_summarize_honest(config_file, tmp_path, capsys):
    out = tmp_path / "o"
    main(["run", "--config", config_file(HONEST), "--out", str(out)])
    capsys.readouterr()
    assert main(["summarize", "--metrics", str(out / "metrics.jsonl")]) == 0
    report = capsys.readouterr().out
    assert "final accuracy" in report and "attackers" not in report


def test_summarize_attacker(config_file, tmp_path, capsys):
    out = tmp_path / "o"
    main(["run", "--config", config_file(ATTACK), "--out", str(out)])
    capsys.readouterr()
    main(["summarize", "--metrics", str(out / "metrics.jsonl")])
    assert "party 1: discard rate 100.00%" in capsys.readouterr().out


def test_summarize_empty(tmp_path, capsys):
    empty = tmp_path / "m.jsonl"
    empty.write_text("")
    assert main(["summarize", "--metrics", str(empty)]) != 0
    assert "parse error" in capsys.readouterr().err
