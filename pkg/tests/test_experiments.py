import csv
import json

import numpy as np
import pytest

from neuboots import experiments as E
from neuboots import metrics, nn
from neuboots.errors import ConfigError, NumericalError

FAST_SGD = {"learning_rate": 0.05, "momentum": 0.9, "batch_size": 32, "epochs": 30}


def _cfg(kind, **kw):
    base = {"kind": kind, "dataset": {"name": "two_moons", "n": 120, "noise": 0.2},
            "arch": {"hidden": [16, 16]}, "sgd": FAST_SGD, "seeds": [0], "B": 5}
    if kind == "regression_coverage":
        base["dataset"] = {"name": "sine", "n": 100, "noise_sd": 0.3}
        base["params"] = {"grid_points": 7}
    base.update(kw)
    return E.ExperimentConfig.from_dict(base)


def _read(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# -- config ------------------------------------------------------------------

@pytest.mark.parametrize("patch, match", [
    ({"kind": "bogus"}, "unknown experiment kind"),
    ({"methods": ["magic"]}, "unknown method"),
    ({"seeds": [1, 1]}, "seeds"),
    ({"B": 0}, "positive"),
    ({"schema_version": 2}, "schema_version"),
    ({"params": {"nonsense": 1}}, "unknown params"),
    ({"surprise": True}, "unknown config fields"),
    ({"sgd": {"learning_rate": -1.0}}, "learning_rate must be positive"),
    ({"methods": [{"name": "neuboots", "seeds": [5]}]}, "not run seeds"),
    ({"methods": ["neuboots", "neuboots"]}, "unique"),
])
def test_config_validation(patch, match):
    doc = {"kind": "calibration", "dataset": {"name": "two_moons"}, **patch}
    with pytest.raises(ConfigError, match=match):
        E.ExperimentConfig.from_dict(doc)


def test_config_round_trips_through_json(tmp_path):
    cfg = _cfg("calibration", methods=["neuboots", {"name": "mc_dropout", "p": 0.2, "label": "drop"}])
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    back = E.load_config(path)
    assert back == cfg
    assert back.config_hash() == cfg.config_hash()


def test_hash_ignores_output_dir_and_workers():
    a = _cfg("calibration")
    b = _cfg("calibration", output_dir="/tmp/elsewhere", workers=3)
    c = _cfg("calibration", B=6)
    assert a.config_hash() == b.config_hash() != c.config_hash()


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        E.load_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError, match="not valid JSON"):
        E.load_config(bad)


def test_streams_are_independent_and_stable():
    a = E.stream(3, "fit/neuboots").random(4)
    assert np.array_equal(a, E.stream(3, "fit/neuboots").random(4))
    assert not np.array_equal(a, E.stream(3, "predict/neuboots").random(4))
    assert not np.array_equal(a, E.stream(4, "fit/neuboots").random(4))


# -- runners ------------------------------------------------------------------

def test_regression_smoke_writes_well_formed_csv(tmp_path):
    cfg = _cfg("regression_coverage", methods=["neuboots", "mc_dropout"], output_dir=str(tmp_path))
    rec = E.run_experiment(cfg)
    rows = _read(tmp_path / "coverage.csv")
    assert len(rows) == 2 * 7
    assert set(rows[0]) == {"method", "seed", "grid_index", "x", "truth", "lower", "upper", "mean", "covered"}
    for r in rows:
        assert float(r["lower"]) <= float(r["mean"]) <= float(r["upper"])
        assert r["covered"] in ("0", "1")
    assert 0.0 <= rec.summary["neuboots"]["mean_coverage"] <= 1.0
    run = json.loads((tmp_path / "run.json").read_text())
    assert run["config_hash"] == cfg.config_hash()
    assert run["seeds"] == [0]
    assert run["code_version"].startswith(E.__version__)
    assert (tmp_path / "timings.csv").exists()


def test_baseline_row_reproduces_plain_training():
    cfg = _cfg("calibration", methods=["baseline"])
    rec = E.run_experiment(cfg, write=False)
    row = rec.table("calibration")[0]
    # redo the same run by hand: same data stream, same fit stream, plain train_loop
    train, test = E._classification_split(cfg, 0)
    arch = E.arch_for(cfg, train)
    rng = E.stream(0, "fit/baseline")
    net = arch.init(rng)
    nn.train_loop(net, train.x, train.y, cfg.sgd, rng, "cross_entropy")
    probs = nn.forward(net, test.x)
    assert row["ece"] == 100 * metrics.ece(probs, test.y)
    assert row["nll"] == metrics.nll(probs, test.y)
    assert row["disagreement"] is None


def test_training_failure_names_the_replication():
    cfg = _cfg("calibration", methods=["neuboots"], seeds=[4],
               sgd={**FAST_SGD, "learning_rate": 1e6, "epochs": 3})
    with pytest.raises(NumericalError, match="seed=4, method=neuboots"):
        E.run_experiment(cfg, write=False)


def test_active_learning_zero_query_is_flat():
    cfg = _cfg("active_learning", methods=["neuboots"],
               params={"n_initial": 20, "query": 0, "stages": 3, "n_test": 100})
    rec = E.run_experiment(cfg, write=False)
    for acq in ("entropy", "random"):
        accs = [r["accuracy"] for r in rec.table("learning_curve") if r["acquisition"] == acq]
        assert len(accs) == 3 and len(set(accs)) == 1


def test_active_learning_grows_the_pool():
    cfg = _cfg("active_learning", methods=["neuboots"],
               params={"n_initial": 20, "query": 7, "stages": 3, "n_test": 100, "acquisitions": ["entropy"]})
    rows = E.run_experiment(cfg, write=False).table("learning_curve")
    assert [r["n_labeled"] for r in rows] == [20, 27, 34]


def test_active_learning_rejects_too_few_initial_samples():
    cfg = _cfg("active_learning", methods=["neuboots"], params={"n_initial": 10})
    with pytest.raises(ConfigError, match="block count"):
        E.run_experiment(cfg, write=False)


def test_imbalanced_smoke_has_k_f1_columns():
    cfg = _cfg("imbalanced", dataset={"name": "imbalanced_gaussians", "k": 4, "counts": [10, 20, 30, 40]},
               methods=["neuboots", "baseline"], params={"n_test_per_class": 20})
    rec = E.run_experiment(cfg, write=False)
    assert len(rec.summary["neuboots"]["mean_f1"]) == 4
    assert len(rec.table("f1")) == 2 * 4


def test_ood_smoke_and_sweep():
    cfg = _cfg("ood", dataset={"name": "gaussians", "k": 3, "n": 150},
               methods=["neuboots", {"name": "deep_ensemble", "B": 5}],
               params={"n_test": 100, "B_sweep": [2, 5, 10]})
    rec = E.run_experiment(cfg, write=False)
    bs = {(r["method"], r["B"]) for r in rec.table("detection")}
    # the 5-member ensemble cannot supply B = 10
    assert bs == {("neuboots", 2), ("neuboots", 5), ("neuboots", 10), ("deep_ensemble", 2), ("deep_ensemble", 5)}


def test_bench_checks_soundness_and_reports_ratios():
    cfg = E.ExperimentConfig("bench_speed", {}, [], B=4,
                             params={"depth": 2, "width": 16, "input_dim": 4, "n_inputs": 50,
                                     "n_train": 64, "repeats": 1, "train_epochs": 1},
                             sgd=nn.SgdConfig(learning_rate=0.01, epochs=1))
    rec = E.run_experiment(cfg, write=False)
    assert rec.table("soundness")[0]["max_abs_gap"] <= 1e-12
    assert rec.summary["speedup_vs_mc_dropout"] > 0
    assert {t["path"] for t in rec.timings} >= {"neuboots_cached", "mc_dropout", "train_plain_epoch"}


@pytest.mark.parametrize("kind", ["calibration", "ood", "regression_coverage"])
def test_rerun_is_byte_identical(kind, tmp_path):
    extra = {"dataset": {"name": "gaussians", "k": 3, "n": 90}, "params": {"n_test": 60, "B_sweep": [2, 5]}} \
        if kind == "ood" else {}
    cfg = _cfg(kind, methods=["neuboots", "mc_dropout"], seeds=[0, 1], **extra)
    outs = []
    for i, workers in enumerate((1, 2)):
        d = tmp_path / str(i)
        E.run_experiment(E.ExperimentConfig.from_dict({**cfg.to_dict(), "output_dir": str(d), "workers": workers}))
        outs.append(d)
    files = sorted(p.name for p in outs[0].glob("*.csv") if p.name != "timings.csv")
    assert files
    for name in files:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


# -- Monte Carlo orderings ------------------------------------------------------------
# Seed-averaged comparisons the runners are expected to reproduce qualitatively.

NOISY_MOONS = {"name": "two_moons", "n": 300, "noise": 0.3, "label_noise": 0.1}


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="not reproduced at desk scale: 20-seed ECE 5.35% vs 4.93% for the "
                                       "baseline, per-seed differences within noise (see decisions ledger)")
def test_neuboots_ece_not_worse_than_baseline_on_noisy_moons():
    cfg = E.ExperimentConfig.from_dict({
        "kind": "calibration", "dataset": NOISY_MOONS, "methods": ["neuboots", "baseline"],
        "arch": {"hidden": [64, 128]}, "B": 10, "seeds": list(range(20)), "params": {"n_test": 1000},
        "sgd": {"learning_rate": 0.01, "momentum": 0.9, "batch_size": 32, "epochs": 100}})
    s = E.run_experiment(cfg, write=False).summary
    assert s["neuboots"]["ece"] <= s["baseline"]["ece"]


@pytest.mark.slow
def test_active_learning_orderings():
    cfg = E.ExperimentConfig.from_dict({
        "kind": "active_learning", "dataset": NOISY_MOONS | {"n": 600}, "methods": ["neuboots"],
        "arch": {"hidden": [16, 16]}, "B": 10, "seeds": list(range(10)),
        "params": {"n_initial": 20, "query": 10, "stages": 5, "n_test": 1000},
        "sgd": {"learning_rate": 0.05, "momentum": 0.9, "batch_size": 16, "epochs": 60}})
    s = E.run_experiment(cfg, write=False).summary
    for acq in ("entropy", "random"):
        curve = s[f"neuboots/{acq}"]["mean_curve"]
        assert curve[-1] >= curve[0]
    assert s["neuboots/entropy"]["area"] >= s["neuboots/random"]["area"]


@pytest.mark.slow
def test_out_distribution_has_larger_logit_spread():
    cfg = E.ExperimentConfig.from_dict({
        "kind": "ood", "dataset": {"name": "gaussians", "k": 3, "n": 300}, "methods": ["neuboots"],
        "arch": {"hidden": [32, 32]}, "seeds": list(range(5)), "params": {"n_test": 400, "B_sweep": [10]},
        "sgd": {"learning_rate": 0.05, "momentum": 0.9, "batch_size": 32, "epochs": 60}})
    rows = E.run_experiment(cfg, write=False).table("logit_std")
    mean = {split: np.mean([r["mean_logit_std"] for r in rows if r["split"] == split]) for split in ("in", "out")}
    assert mean["out"] >= mean["in"]


@pytest.mark.slow
def test_balanced_counts_give_even_f1():
    cfg = E.ExperimentConfig.from_dict({
        "kind": "imbalanced", "dataset": {"name": "imbalanced_gaussians", "k": 4, "counts": [150] * 4, "radius": 6.0},
        "methods": ["neuboots"], "arch": {"hidden": [32, 32]}, "seeds": [0, 1, 2],
        "sgd": {"learning_rate": 0.01, "momentum": 0.9, "batch_size": 32, "epochs": 40}})
    f1 = E.run_experiment(cfg, write=False).summary["neuboots"]["mean_f1"]
    assert max(f1) - min(f1) < 0.1


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="not reproduced at desk scale: averaging softmax over alpha draws "
                                       "pulls mass off the low-margin minority class (see decisions ledger)")
def test_neuboots_minority_f1_on_the_ten_class_ramp():
    cfg = E.ExperimentConfig.from_dict({
        "kind": "imbalanced",
        "dataset": {"name": "imbalanced_gaussians", "k": 10, "counts": list(range(50, 501, 50)), "radius": 4.0},
        "methods": ["neuboots", "baseline"], "arch": {"hidden": [32, 32]}, "B": 10, "seeds": list(range(20)),
        "sgd": {"learning_rate": 0.01, "momentum": 0.9, "batch_size": 64, "epochs": 30}})
    s = E.run_experiment(cfg, write=False).summary
    assert s["neuboots"]["minority_f1"] >= s["baseline"]["minority_f1"]


@pytest.mark.slow
def test_neuboots_predicts_faster_than_mc_dropout_at_b5():
    cfg = E.ExperimentConfig.from_dict({
        "kind": "calibration", "dataset": {"name": "gaussians", "k": 10, "n": 500, "dim": 32},
        "methods": ["baseline", "neuboots", "mc_dropout"], "arch": {"hidden": [256] * 4}, "B": 5,
        "seeds": [0, 1], "params": {"n_test": 4000},
        "sgd": {"learning_rate": 0.01, "momentum": 0.9, "batch_size": 128, "epochs": 2}})
    rel = E.run_experiment(cfg, write=False).summary["relative_time"]
    assert rel["neuboots"]["predict_seconds"] < rel["mc_dropout"]["predict_seconds"]


def test_bench_paths_agree_without_amortization():
    cfg = E.ExperimentConfig("bench_speed", {}, [], B=1,
                             params={"depth": 4, "width": 64, "n_inputs": 2000, "repeats": 20,
                                     "n_train": 64, "train_epochs": 1},
                             sgd=nn.SgdConfig(learning_rate=0.01, epochs=1))
    sec = E.run_experiment(cfg, write=False).summary["seconds"]
    paths = [sec["neuboots_cached"], sec["neuboots_naive"], sec["mc_dropout"]]
    assert max(paths) <= 2 * min(paths)
