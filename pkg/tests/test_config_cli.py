import csv
import json

import numpy as np
import pytest

from tokenbudget import checks, cli
from tokenbudget import numerics as nx
from tokenbudget.config import ConfigError, RunConfig, dump_config, parse_config

TINY = """\
T: int = 3
N: int = 6
D: int = 8
T_plus: int = 3
L: int = 1
K: int = 2
D_head: int = 4
n_scenes: int = 3
epochs: int = 2
teacher_width: int = 16
teacher_depth: int = 1
teacher_heads: int = 2
n_text: int = 2
salient_per_frame: int = 1
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def test_config_roundtrip():
    cfg = RunConfig(T=4, lam=2.5, strided_tau=True, dataset_path="x")
    assert parse_config(dump_config(cfg)) == cfg


def test_config_errors():
    for text in ("T = 3", "T: float = 3.0", "bogus: int = 1", "T: int = x", "K: int = 99"):
        with pytest.raises(ConfigError):
            parse_config(text)
    assert parse_config("# comment\n\nT: int = 5  # trailing\n").T == 5


def test_train_writes_artifacts_and_is_reproducible(tiny, tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert cli.main(["train", "--config", str(tiny), "--out", str(out)]) == 0
    for name in ("config.resolved", "loss.csv", "loss.png", "merge_trace.jsonl", "summary.json",
                 "checkpoint/manifest.json"):
        assert (outs[0] / name).exists(), name
    assert (outs[0] / "loss.csv").read_bytes() == (outs[1] / "loss.csv").read_bytes()
    rows = list(csv.DictReader(open(outs[0] / "loss.csv")))
    assert [r["epoch"] for r in rows] == ["1", "2"]
    assert parse_config((outs[0] / "config.resolved").read_text()) == parse_config(TINY)


def test_missing_dataset(tiny, tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text(TINY + f"dataset_path: str = {tmp_path / 'nowhere'}\n")
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert capsys.readouterr().err.startswith("error=dataset_not_found")


def test_synth_then_train_from_dataset(tiny, tmp_path):
    data = tmp_path / "data"
    assert cli.main(["synth", "--config", str(tiny), "--out", str(data)]) == 0
    cfg = tmp_path / "ds.cfg"
    cfg.write_text(TINY + f"dataset_path: str = {data}\nepochs: int = 1\n")
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0


def test_bad_and_missing_config(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("T: int = oops\n")
    assert cli.main(["flops", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "error=bad_config" in capsys.readouterr().err
    assert cli.main(["flops", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path)]) == 2
    assert "error=config_not_found" in capsys.readouterr().err
    assert cli.main(["nonsense"]) == 2


def test_ablate(tiny, tmp_path, capsys):
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--config", str(tiny), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    assert [r["mode"] for r in rows] == ["hard", "soft", "anchors_only"]
    assert all(float(r["total"]) > 0 for r in rows)
    assert (out / "ablation.png").exists()
    assert cli.main(["ablate", "--config", str(tiny), "--out", str(out), "--modes", ""]) == 2
    assert cli.main(["ablate", "--config", str(tiny), "--out", str(out), "--modes", "hard,bogus"]) == 2
    assert "error=unknown_mode" in capsys.readouterr().err


def test_ablate_window_census(tiny):
    # at T=3 the window spans every frame, so the comparison needs more frames
    cfg = parse_config(TINY).replace(T=8, epochs=1, n_scenes=1)
    rows = cli.run_ablation(cfg, ["mixer", "mixer_no_window"])
    assert rows[0]["predictor_ops"] < rows[1]["predictor_ops"]


def test_flops_command(tmp_path, capsys):
    cfg = tmp_path / "f.cfg"
    cfg.write_text("T: int = 6\nN: int = 10\nD: int = 16\nkappa: int = 2\nK: int = 2\n")
    assert cli.main(["flops", "--config", str(cfg), "--out", str(tmp_path / "f")]) == 0
    rep = json.loads((tmp_path / "f" / "flops.json").read_text())
    assert rep["conventions"] == "multiply-add"
    assert (tmp_path / "f" / "flops.png").exists()
    line = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert line["bounds"] == [5.0, 25.0]


@pytest.mark.parametrize("scope", ["numerics", "acm"])
def test_check_passes(scope, capsys):
    assert cli.main(["check", "--scope", scope]) == 0
    out = capsys.readouterr().out
    assert f"PASS scope={scope}" in out


def test_injected_wrong_backward_is_named(monkeypatch, capsys):
    real = nx.gelu

    def broken(x):
        out = real(x)
        if out.requires_grad:
            inner = out._backward
            out._backward = lambda g: inner(2.0 * g)
        return out

    monkeypatch.setattr(nx, "gelu", broken)
    assert cli.main(["check", "--scope", "numerics"]) == 1
    captured = capsys.readouterr()
    assert "FAIL scope=numerics op=gelu" in captured.out
    assert "numerics.gelu" in captured.err
    assert not any(r.name == "matmul" and not r.ok for r in checks.run_checks("numerics"))


def test_csv_floats_are_plain_numbers(tiny, tmp_path):
    out = tmp_path / "t"
    assert cli.main(["train", "--config", str(tiny), "--out", str(out)]) == 0
    for row in csv.DictReader(open(out / "loss.csv")):
        float(row["total"])
