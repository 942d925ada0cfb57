import csv
import io
import json
import subprocess
import sys

import pytest

from neuboots import cli
from neuboots import data as D
from neuboots.weights import make_rng

QUICK = ["--epochs", "20", "--lr", "0.05", "--batch-size", "32"]


@pytest.fixture
def moons_csv(tmp_path):
    data = D.synth_classification("two_moons", 80, None, make_rng(0))
    named = D.Dataset(data.x, data.y, "classification", 2, class_names=("a", "b"))
    path = tmp_path / "moons.csv"
    D.write_csv_dataset(path, named, label="label")
    return path


@pytest.fixture
def sine_csv(tmp_path):
    data, _ = D.synth_regression("sine", 60, 0.2, make_rng(1))
    path = tmp_path / "sine.csv"
    D.write_csv_dataset(path, data)
    return path


def test_train_then_predict_classification(moons_csv, tmp_path, capsys):
    model = tmp_path / "m.nbts"
    code = cli.main(["train", "--data", str(moons_csv), "--label", "label", "--classes", "a,b",
                     "--hidden", "16,8", "--out", str(model), *QUICK])
    assert code == 0
    assert json.loads(capsys.readouterr().out)["method"] == "neuboots"
    out = tmp_path / "pred.csv"
    assert cli.main(["predict", "--model", str(model), "--data", str(moons_csv), "--label", "label",
                     "--B", "7", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 80
    assert set(rows[0]) == {"p_0", "p_1", "predicted", "predictive_entropy", "logit_std"}
    assert abs(float(rows[0]["p_0"]) + float(rows[0]["p_1"]) - 1) < 1e-12


@pytest.mark.parametrize("method", ["baseline", "mc_dropout", "rwb"])
def test_train_other_methods_regression_to_stdout(method, sine_csv, tmp_path, capsys):
    model = tmp_path / "m.json"
    assert cli.main(["train", "--data", str(sine_csv), "--task", "regression", "--method", method, "--B", "3",
                     "--hidden", "8", "--out", str(model), "--format", "json", *QUICK]) == 0
    capsys.readouterr()
    assert cli.main(["predict", "--model", str(model), "--data", str(sine_csv), "--label", "y", "--B", "5"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert len(rows) == 60
    assert all(float(r["lower"]) <= float(r["upper"]) for r in rows)


def test_experiment_flags_override_config(tmp_path, capsys):
    cfg = {"kind": "calibration", "dataset": {"name": "two_moons", "n": 60}, "methods": ["neuboots"],
           "arch": {"hidden": [8]}, "sgd": {"epochs": 100, "learning_rate": 0.05}, "B": 3}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / "run"
    code = cli.main(["experiment", "calibration", "--config", str(path), "--output-dir", str(out),
                     "--seeds", "2,3", "--epochs", "5"])
    assert code == 0
    run = json.loads((out / "run.json").read_text())
    assert run["seeds"] == [2, 3]
    assert run["config"]["sgd"]["epochs"] == 5
    assert (out / "calibration.csv").exists()


def test_bench_verb(capsys):
    code = cli.main(["bench", "--B", "3", "--depth", "2", "--width", "8", "--repeats", "1"])
    assert code == 0
    assert "speedup_vs_mc_dropout" in capsys.readouterr().out


# -- exit codes ------------------------------------------------------------------

def test_usage_errors_exit_1(tmp_path, capsys):
    assert cli.main([]) == 1
    assert cli.main(["train", "--data", "x.csv"]) == 1  # missing --out
    assert cli.main(["frobnicate"]) == 1
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"kind": "ood", "dataset": {}}))
    assert cli.main(["experiment", "calibration", "--config", str(path)]) == 1
    assert "config error" in capsys.readouterr().err


def test_data_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("x1,x2,label\n0.1,0.2,a\nnan,0.3,b\n")
    code = cli.main(["train", "--data", str(bad), "--label", "label", "--classes", "a,b",
                     "--out", str(tmp_path / "m"), "--hidden", "2"])
    assert code == 2
    assert "row 2, column 'x1'" in capsys.readouterr().err
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"not a model")
    assert cli.main(["predict", "--model", str(junk), "--data", str(bad)]) == 2


def test_feature_count_mismatch_exits_2(moons_csv, sine_csv, tmp_path):
    model = tmp_path / "m"
    assert cli.main(["train", "--data", str(sine_csv), "--task", "regression", "--hidden", "4",
                     "--out", str(model), "--epochs", "5", "--lr", "0.01"]) == 0
    assert cli.main(["predict", "--model", str(model), "--data", str(moons_csv), "--label", "label"]) == 2


def test_divergence_exits_3_and_names_member(sine_csv, tmp_path, capsys):
    code = cli.main(["train", "--data", str(sine_csv), "--task", "regression", "--method", "standard_bootstrap",
                     "--B", "3", "--hidden", "8", "--lr", "1e6", "--epochs", "5", "--out", str(tmp_path / "m")])
    assert code == 3
    assert "ensemble member" in capsys.readouterr().err


def test_console_entry_point_runs(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "neuboots.cli", "bench", "--B", "0"],
                          capture_output=True, text=True)
    assert proc.returncode == 1
