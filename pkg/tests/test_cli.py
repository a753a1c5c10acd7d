import hashlib
import json

import pytest

from sdcnet.cli import run_cli


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def data(tmp_path):
    out = tmp_path / "data.csv"
    assert run_cli(["synth", "--subjects", "3", "--trials", "3", "--windows", "6", "--dim", "10",
                    "--out", str(out)]) == 0
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# short run\nepochs = 2\nbatch_size = 8\n")
    return out, cfg


def test_synth_then_loso(data, tmp_path, capsys):
    out, cfg = data
    report = tmp_path / "r.json"
    mi = tmp_path / "mi.csv"
    assert run_cli(["loso", "--data", str(out), "--config", str(cfg), "--report", str(report),
                    "--mi-csv", str(mi)]) == 0
    rep = json.loads(report.read_text())
    assert len(rep["fold_accuracies"]) == 3
    assert len(rep["confusion_matrices"]) == 3
    assert mi.read_text().startswith("class,band,channel,value\n")
    assert json.loads(capsys.readouterr().out)["folds"] == 3


def test_ablate_rows(data, tmp_path):
    out, cfg = data
    report = tmp_path / "abl.json"
    assert run_cli(["ablate", "--data", str(out), "--config", str(cfg), "--report", str(report)]) == 0
    rows = json.loads(report.read_text())["rows"]
    assert len(rows) == 7 and rows[-1]["strategy"] == "full-model"
    assert len(report.with_suffix(".csv").read_text().splitlines()) == 8


def test_train_missing_subject(data, capsys):
    out, cfg = data
    assert run_cli(["train", "--data", str(out), "--config", str(cfg), "--target-subject", "99"]) == 1
    assert "99" in capsys.readouterr().err


def test_train_checkpoint_mimap_export(data, tmp_path):
    out, cfg = data
    ckpt, log = tmp_path / "m.ckpt", tmp_path / "log.jsonl"
    assert run_cli(["train", "--data", str(out), "--config", str(cfg), "--target-subject", "1",
                    "--log", str(log), "--checkpoint", str(ckpt)]) == 0
    assert len(log.read_text().splitlines()) == 2
    mi = tmp_path / "mi.csv"
    assert run_cli(["mimap", "--checkpoint", str(ckpt), "--data", str(out), "--channels", "2",
                    "--out", str(mi)]) == 0
    assert len(mi.read_text().splitlines()) == 1 + 3 * 5 * 2
    emb = tmp_path / "emb.csv"
    assert run_cli(["export-emb", "--checkpoint", str(ckpt), "--data", str(out), "--out", str(emb)]) == 0
    assert emb.read_text().splitlines()[0].endswith(",e63")
    assert run_cli(["mimap", "--checkpoint", str(ckpt), "--data", str(out), "--channels", "3",
                    "--out", str(mi)]) == 1


@pytest.mark.parametrize("cmd", ["synth", "extract", "train", "loso", "ablate", "mimap", "export-emb"])
def test_help(cmd, capsys):
    assert run_cli([cmd, "--help"]) == 0
    assert "usage" in capsys.readouterr().out


def test_usage_errors(tmp_path, capsys):
    assert run_cli([]) == 1
    assert run_cli(["loso", "--data", str(tmp_path / "missing.csv"), "--report", "x"]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_key = 1\n")
    (tmp_path / "d.csv").write_text("subject,trial,window,label,f0\n0,0,0,0,1.0\n")
    assert run_cli(["loso", "--data", str(tmp_path / "d.csv"), "--config", str(bad),
                    "--report", "x"]) == 1
    assert "no_such_key" in capsys.readouterr().err


def test_extract(tmp_path):
    from sdcnet.features import save_raw_trials, synthetic_trials
    raw = tmp_path / "raw.csv"
    save_raw_trials(synthetic_trials(1, 2, channels=2, seconds=2, sample_rate_hz=200, num_classes=2, seed=0), raw)
    out = tmp_path / "f.csv"
    assert run_cli(["extract", "--raw", str(raw), "--out", str(out)]) == 0
    assert out.read_text().startswith("subject,trial,window,label,f0")


def test_reruns_are_hash_identical(data, tmp_path):
    out, cfg = data
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for r in (a, b):
        assert run_cli(["loso", "--data", str(out), "--config", str(cfg), "--report", str(r)]) == 0
    assert sha(a) == sha(b)
