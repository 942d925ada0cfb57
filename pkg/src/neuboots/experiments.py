"""Experiment configs, runners and result persistence.

A run is a pure function of its config and the code version: every random
draw comes from a stream keyed by ``(seed, purpose)``, replications are
assembled in seed order whatever order the worker threads finish in, and
metric CSVs write floats with ``repr`` so re-runs compare byte for byte.
Wall-clock measurements go to ``timings.csv``, the one file that is not
expected to reproduce.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__, metrics, nn
from . import data as D
from . import generator as G
from .baselines import (ArchSpec, DropoutPredictor, deep_ensemble_train, dropout_train, ensemble_predict,
                        mc_dropout_predict, rwb_train, standard_bootstrap_train)
from .errors import ConfigError, NumericalError
from .weights import assign_blocks

SCHEMA_VERSION = 1
KINDS = ("regression_coverage", "calibration", "active_learning", "ood", "imbalanced", "bench_speed")
METHODS = ("neuboots", "baseline", "standard_bootstrap", "rwb", "deep_ensemble", "mc_dropout")

# Kind-specific knobs and their defaults; unknown keys are rejected.
PARAM_DEFAULTS = {
    "regression_coverage": {"grid_points": 21, "grid_margin": 0.5, "level": 0.95},
    "calibration": {"n_test": 1000, "n_bins": 15, "test_fraction": 0.3},
    "active_learning": {"n_initial": 100, "query": 10, "stages": 5, "acquisitions": ["entropy", "random"],
                        "n_test": 1000, "test_fraction": 0.3},
    "ood": {"n_test": 400, "out_shift": 10.0, "B_sweep": [2, 5, 10, 20, 30]},
    "imbalanced": {"n_test_per_class": 200},
    "bench_speed": {"depth": 8, "width": 128, "input_dim": 32, "k": 10, "n_inputs": 1000,
                    "p": 0.1, "repeats": 3, "n_train": 1000, "train_epochs": 2},
}


# -- config ---------------------------------------------------------------------

@dataclass(frozen=True)
class MethodSpec:
    """One method entry. ``B``, ``sgd`` and ``seeds`` override the run-level values.

    ``seeds`` restricts an expensive method to a prefix-style subset of the
    run's seeds (every listed seed must also be a run seed).
    """

    name: str
    B: int | None = None
    sgd: dict = field(default_factory=dict)
    seeds: tuple[int, ...] | None = None
    p: float = 0.1
    label: str | None = None

    @property
    def tag(self) -> str:
        return self.label or self.name


@dataclass(frozen=True)
class ArchConfig:
    hidden: tuple[int, ...] = (64, 64)
    activations: str | tuple[str, ...] = "relu"
    gain: float = 1.0


@dataclass
class ExperimentConfig:
    kind: str
    dataset: dict
    methods: list[MethodSpec]
    B: int = 10
    sgd: nn.SgdConfig = field(default_factory=nn.SgdConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str | None = None
    arch: ArchConfig = field(default_factory=ArchConfig)
    params: dict = field(default_factory=dict)
    workers: int = 1
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {self.schema_version} is not supported (expected {SCHEMA_VERSION})")
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; choose from {KINDS}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be a non-empty list without repeats")
        if self.B < 1 or self.workers < 1:
            raise ConfigError("B and workers must be positive")
        for m in self.methods:
            if m.name not in METHODS:
                raise ConfigError(f"unknown method {m.name!r}; choose from {METHODS}")
            if m.seeds is not None and not set(m.seeds) <= set(self.seeds):
                raise ConfigError(f"method {m.tag!r} lists seeds that are not run seeds")
        tags = [m.tag for m in self.methods]
        if len(set(tags)) != len(tags):
            raise ConfigError(f"method labels must be unique, got {tags}")
        unknown = set(self.params) - set(PARAM_DEFAULTS[self.kind])
        if unknown:
            raise ConfigError(f"unknown params for {self.kind}: {sorted(unknown)}")

    def param(self, name):
        return self.params.get(name, PARAM_DEFAULTS[self.kind][name])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(m).items()}
                        for m in self.methods]
        d["arch"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.arch).items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ConfigError(f"unknown config fields: {sorted(set(d) - known)}")
        if "kind" not in d or "dataset" not in d:
            raise ConfigError("config needs at least 'kind' and 'dataset'")
        try:
            methods = [MethodSpec(m) if isinstance(m, str) else
                       MethodSpec(**{**m, "seeds": tuple(m["seeds"]) if m.get("seeds") is not None else None})
                       for m in d.get("methods", ["neuboots"])]
            d["methods"] = methods
            if "sgd" in d:
                d["sgd"] = nn.SgdConfig(**d["sgd"])
            if "arch" in d:
                a = dict(d["arch"])
                a["hidden"] = tuple(a.get("hidden", ArchConfig.hidden))
                if not isinstance(a.get("activations", "relu"), str):
                    a["activations"] = tuple(a["activations"])
                d["arch"] = ArchConfig(**a)
            if "seeds" in d:
                d["seeds"] = [int(s) for s in d["seeds"]]
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON config, output directory and worker count excluded."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(doc)


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


# -- records ---------------------------------------------------------------------

@dataclass
class RunRecord:
    kind: str
    config: dict
    config_hash: str
    code_version: str
    seeds: list[int]
    tables: dict[str, list[dict]]
    timings: list[dict]
    summary: dict

    def table(self, name) -> list[dict]:
        return self.tables[name]


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_csv(path, rows: list[dict]) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(v) for k, v in r.items()})


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_record(record: RunRecord, out_dir) -> Path:
    """One CSV per table, ``timings.csv``, and ``run.json`` with the provenance."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, rows in record.tables.items():
        write_csv(out / f"{name}.csv", rows)
    write_csv(out / "timings.csv", record.timings)
    doc = {
        "kind": record.kind,
        "config_hash": record.config_hash,
        "code_version": record.code_version,
        "seeds": record.seeds,
        "tables": sorted(f"{n}.csv" for n in record.tables),
        "summary": _jsonable(record.summary),
        "config": _jsonable(record.config),
    }
    (out / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


# -- shared plumbing ---------------------------------------------------------------

def stream(seed: int, purpose: str) -> np.random.Generator:
    """Independent PCG64 stream for ``(seed, purpose)``; purposes are stable strings."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, zlib.crc32(purpose.encode())])))


@dataclass
class Fitted:
    predict: Callable[[np.ndarray, int, np.random.Generator], G.PredictionEnsemble]
    model: object
    train_seconds: float
    max_B: int | None


def arch_for(cfg: ExperimentConfig, data: D.Dataset) -> ArchSpec:
    output = "softmax" if data.task == "classification" else "identity"
    return ArchSpec((data.p, *cfg.arch.hidden, data.out_dim), cfg.arch.activations, output, cfg.arch.gain)


def method_sgd(cfg: ExperimentConfig, spec: MethodSpec) -> nn.SgdConfig:
    try:
        return replace(cfg.sgd, **spec.sgd)
    except TypeError as exc:
        raise ConfigError(f"method {spec.tag!r}: bad sgd override: {exc}") from exc


def train_method(spec: MethodSpec, arch: ArchSpec, sgd: nn.SgdConfig, B: int, data: D.Dataset,
                 rng: np.random.Generator) -> Fitted:
    """Train one method. ``predict(x, B, rng)`` returns B samples (B is capped for ensembles)."""
    t0 = time.perf_counter()
    if spec.name == "neuboots":
        gen = G.GeneratorNet(arch.init(rng))
        labels = data.y if data.task == "classification" else None
        u = assign_blocks(labels, gen.S, rng, n=data.n)
        gen, _ = G.train(gen, data.x, data.y, u, sgd, rng)
        return Fitted(lambda x, b, r: G.predict_bootstrap(gen, x, b, r), gen, time.perf_counter() - t0, None)
    if spec.name == "baseline":
        net = arch.init(rng)
        nn.train_loop(net, data.x, data.y, sgd, rng, arch.loss_kind)

        def predict(x, b, r):
            z = nn.logits(net, x)[None]
            return G.PredictionEnsemble(nn.apply_output(net, z), z)
        return Fitted(predict, net, time.perf_counter() - t0, 1)
    if spec.name == "mc_dropout":
        pred = dropout_train(arch, data.x, data.y, spec.p, sgd, rng)
        return Fitted(lambda x, b, r: mc_dropout_predict(pred, x, b, r), pred, time.perf_counter() - t0, None)
    trainer = {"standard_bootstrap": standard_bootstrap_train, "rwb": rwb_train,
               "deep_ensemble": deep_ensemble_train}[spec.name]
    ens = trainer(arch, data.x, data.y, B, sgd, rng)

    def predict(x, b, r):
        full = ensemble_predict(ens, x)
        return G.PredictionEnsemble(full.samples[:b], full.logits[:b])
    return Fitted(predict, ens, time.perf_counter() - t0, B)


def fit_method(spec: MethodSpec, cfg: ExperimentConfig, data: D.Dataset, rng: np.random.Generator,
               arch: ArchSpec | None = None) -> Fitted:
    """:func:`train_method` with the architecture, SGD settings and B taken from ``cfg``."""
    return train_method(spec, arch or arch_for(cfg, data), method_sgd(cfg, spec), spec.B or cfg.B, data, rng)


def _fit_annotated(spec, cfg, data, seed, rng, arch=None) -> Fitted:
    try:
        return fit_method(spec, cfg, data, rng, arch)
    except NumericalError as exc:
        raise NumericalError(f"replication seed={seed}, method={spec.tag}: {exc}", batch=exc.batch,
                             epoch=exc.epoch, step=exc.step, member=exc.member) from exc


def _methods_for(cfg, seed):
    return [m for m in cfg.methods if m.seeds is None or seed in m.seeds]


def _fan_out(cfg, per_seed):
    """Run ``per_seed(seed)`` for every seed; results come back in seed order."""
    seeds = sorted(cfg.seeds)
    if cfg.workers == 1:
        return [per_seed(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(per_seed, seeds))


def _collect(results, names):
    tables = {n: [] for n in names}
    timings = []
    for res in results:
        for n in names:
            tables[n].extend(res.get(n, []))
        timings.extend(res.get("timings", []))
    return tables, timings


def _record(cfg, tables, timings, summary) -> RunRecord:
    return RunRecord(cfg.kind, cfg.to_dict(), cfg.config_hash(), code_version(), sorted(cfg.seeds),
                     tables, timings, summary)


def _classification_split(cfg, seed):
    """Train and test sets: fresh draws from a synthetic generator, or a shuffled CSV split."""
    ds = dict(cfg.dataset)
    rng = stream(seed, "data")
    if "csv" in ds:
        schema = D.CsvSchema(label=ds.get("label", "y"), task="classification",
                             features=tuple(ds["features"]) if ds.get("features") else None,
                             classes=tuple(ds["classes"]) if ds.get("classes") else None, k=ds.get("k"))
        full = D.load_csv_dataset(ds["csv"], schema)
        n_train = full.n - int(round(cfg.param("test_fraction") * full.n))
        return D.shuffle_split(full, n_train, rng)
    name = ds.pop("name", None)
    n = ds.pop("n", 500)
    try:
        params = D.ClassificationParams(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in ds.items()})
    except TypeError as exc:
        raise ConfigError(f"bad dataset parameters: {exc}") from exc
    train = D.synth_classification(name, n, params, rng)
    test = D.synth_classification(name, cfg.param("n_test"), replace(params, counts=None), rng)
    return train, test


# -- regression coverage -------------------------------------------------------------

def run_regression_coverage(cfg: ExperimentConfig) -> RunRecord:
    """Coverage of pointwise percentile bands for the true regression function."""
    ds = cfg.dataset
    if "name" not in ds:
        raise ConfigError("regression_coverage needs a synthetic dataset with a known truth")
    f = D.truth_function(ds["name"])
    grid = D.regression_grid(ds["name"], cfg.param("grid_points"), cfg.param("grid_margin"))
    truth = f(grid[:, 0])
    level = cfg.param("level")

    def per_seed(seed):
        data, _ = D.synth_regression(ds["name"], ds.get("n", 500), ds.get("noise_sd", 0.5), stream(seed, "data"))
        rows, times = [], []
        for spec in _methods_for(cfg, seed):
            fit = _fit_annotated(spec, cfg, data, seed, stream(seed, f"fit/{spec.tag}"))
            t0 = time.perf_counter()
            ens = fit.predict(grid, spec.B or cfg.B, stream(seed, f"predict/{spec.tag}"))
            lower, upper, mean = G.confidence_band(ens.samples[..., 0], level)
            hit, _, _ = metrics.coverage_rate(lower, upper, truth)
            times.append({"method": spec.tag, "seed": seed, "train_seconds": fit.train_seconds,
                          "predict_seconds": time.perf_counter() - t0})
            for g in range(len(truth)):
                rows.append({"method": spec.tag, "seed": seed, "grid_index": g, "x": grid[g, 0],
                             "truth": truth[g], "lower": lower[g], "upper": upper[g], "mean": mean[g],
                             "covered": bool(hit[0, g])})
        return {"coverage": rows, "timings": times}

    tables, timings = _collect(_fan_out(cfg, per_seed), ["coverage"])
    summary_rows, summary = [], {}
    for spec in cfg.methods:
        rows = [r for r in tables["coverage"] if r["method"] == spec.tag]
        if not rows:
            continue
        hits = np.array([r["covered"] for r in rows], dtype=float).reshape(-1, len(truth))
        per_point = hits.mean(axis=0)
        for g in range(len(truth)):
            summary_rows.append({"method": spec.tag, "grid_index": g, "x": grid[g, 0],
                                 "coverage": per_point[g], "replications": hits.shape[0]})
        summary[spec.tag] = {"mean_coverage": float(per_point.mean()), "min_coverage": float(per_point.min()),
                             "replications": hits.shape[0]}
    tables["coverage_summary"] = summary_rows
    return _record(cfg, tables, timings, summary)


# -- calibration -------------------------------------------------------------------

def run_calibration(cfg: ExperimentConfig) -> RunRecord:
    """Held-out calibration and diversity per method, plus train and predict times."""
    n_bins = cfg.param("n_bins")

    def per_seed(seed):
        train, test = _classification_split(cfg, seed)
        rows, bins, times = [], [], []
        for spec in _methods_for(cfg, seed):
            fit = _fit_annotated(spec, cfg, train, seed, stream(seed, f"fit/{spec.tag}"))
            t0 = time.perf_counter()
            ens = fit.predict(test.x, spec.B or cfg.B, stream(seed, f"predict/{spec.tag}"))
            predict_seconds = time.perf_counter() - t0
            report = metrics.calibration_report(ens.mean(), test.y, n_bins)
            row = {"method": spec.tag, "seed": seed, **report.row()}
            if ens.B >= 2:
                row.update(metrics.diversity(ens.samples.argmax(axis=-1), test.y).row())
            else:
                row.update({"ratio_error": None, "q_statistic": None, "correlation": None, "disagreement": None})
            rows.append(row)
            for b, (c, a, n) in enumerate(zip(report.bin_confidence, report.bin_accuracy, report.bin_count)):
                bins.append({"method": spec.tag, "seed": seed, "bin": b, "confidence": c, "accuracy": a, "count": n})
            times.append({"method": spec.tag, "seed": seed, "train_seconds": fit.train_seconds,
                          "predict_seconds": predict_seconds})
        return {"calibration": rows, "reliability": bins, "timings": times}

    tables, timings = _collect(_fan_out(cfg, per_seed), ["calibration", "reliability"])
    summary = {}
    for spec in cfg.methods:
        rows = [r for r in tables["calibration"] if r["method"] == spec.tag]
        summary[spec.tag] = {k: _nanmean([r[k] for r in rows])
                             for k in ("error_rate", "ece", "nll", "brier", "disagreement")}
    summary["relative_time"] = _relative_times(timings, cfg.methods)
    return _record(cfg, tables, timings, summary)


def _nanmean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def _relative_times(timings, methods):
    """Mean train and predict seconds per method divided by those of the first method."""
    def mean_of(tag, key):
        return float(np.mean([t[key] for t in timings if t["method"] == tag]))
    ref = methods[0].tag
    out = {}
    for spec in methods:
        if any(t["method"] == spec.tag for t in timings):
            out[spec.tag] = {k: mean_of(spec.tag, k) / mean_of(ref, k) for k in ("train_seconds", "predict_seconds")}
    return out


# -- active learning ------------------------------------------------------------------

def run_active_learning(cfg: ExperimentConfig) -> RunRecord:
    """Pool-based acquisition by predictive entropy of the ensemble mean, with a random control.

    Each stage retrains from scratch with the same training stream, so a
    stage that adds no data reproduces the previous stage exactly.
    """
    n_initial, query, stages = cfg.param("n_initial"), cfg.param("query"), cfg.param("stages")
    acquisitions = cfg.param("acquisitions")
    if set(acquisitions) - {"entropy", "random"}:
        raise ConfigError(f"acquisitions must be 'entropy' or 'random', got {acquisitions}")

    def per_seed(seed):
        pool, test = _classification_split(cfg, seed)
        if n_initial > pool.n:
            raise ConfigError(f"n_initial={n_initial} exceeds the pool size {pool.n}")
        if any(m.name == "neuboots" for m in cfg.methods) and cfg.arch.hidden[-1] > n_initial:
            raise ConfigError(f"n_initial={n_initial} is below the NeuBoots block count "
                              f"S={cfg.arch.hidden[-1]}; every block needs a sample")
        start = stream(seed, "initial").permutation(pool.n)[:n_initial]
        rows = []
        for spec in _methods_for(cfg, seed):
            for acq in acquisitions:
                labeled = list(start)
                pick_rng = stream(seed, f"acquire/{spec.tag}/{acq}")
                for stage in range(stages):
                    fit = _fit_annotated(spec, cfg, pool.subset(np.array(labeled)), seed,
                                         stream(seed, f"fit/{spec.tag}"))
                    ens = fit.predict(test.x, spec.B or cfg.B, stream(seed, f"predict/{spec.tag}"))
                    acc = float(np.mean(ens.mean().argmax(axis=1) == test.y))
                    rows.append({"method": spec.tag, "acquisition": acq, "seed": seed, "stage": stage,
                                 "n_labeled": len(labeled), "accuracy": acc})
                    if stage == stages - 1 or query == 0:
                        continue
                    unlabeled = np.setdiff1d(np.arange(pool.n), labeled)
                    if acq == "random":
                        score = pick_rng.random(len(unlabeled))
                    else:
                        probs = fit.predict(pool.x[unlabeled], spec.B or cfg.B, pick_rng).mean()
                        score = metrics.entropy(probs)
                    chosen = unlabeled[np.argsort(-score, kind="stable")[:query]]
                    labeled.extend(int(i) for i in chosen)
        return {"learning_curve": rows}

    tables, timings = _collect(_fan_out(cfg, per_seed), ["learning_curve"])
    summary = {}
    for spec in cfg.methods:
        for acq in acquisitions:
            rows = [r for r in tables["learning_curve"] if r["method"] == spec.tag and r["acquisition"] == acq]
            if rows:
                acc = np.array([r["accuracy"] for r in rows]).reshape(-1, stages)
                summary[f"{spec.tag}/{acq}"] = {"mean_curve": acc.mean(axis=0).tolist(),
                                                "area": float(acc.mean())}
    return _record(cfg, tables, timings, summary)


# -- out-of-distribution detection ------------------------------------------------------

def _split_half(a):
    h = len(a) // 2
    return a[:h], a[h:]


def run_ood(cfg: ExperimentConfig) -> RunRecord:
    """Detector on four ensemble statistics; the out-distribution shifts every class mean.

    For each B in the sweep the first B samples of one prediction are used,
    so ensembles with fewer members only report the B they can supply.
    Half of each held-out set fits the detector and the other half scores it.
    """
    ds = dict(cfg.dataset)
    name, n = ds.pop("name", "gaussians"), ds.pop("n", 500)
    if name not in ("gaussians", "imbalanced_gaussians"):
        raise ConfigError("ood runs use a Gaussian-class generator")
    try:
        params = D.ClassificationParams(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in ds.items()})
    except TypeError as exc:
        raise ConfigError(f"bad dataset parameters: {exc}") from exc
    n_test, sweep = cfg.param("n_test"), sorted(cfg.param("B_sweep"))
    out_params = replace(params, counts=None, shift=params.shift + cfg.param("out_shift"))

    def per_seed(seed):
        rng = stream(seed, "data")
        train = D.synth_classification(name, n, params, rng)
        test_in = D.synth_classification("gaussians", n_test, replace(params, counts=None), rng)
        test_out = D.synth_classification("gaussians", n_test, out_params, rng)
        perm_in, perm_out = rng.permutation(n_test), rng.permutation(n_test)
        rows, stds, times = [], [], []
        for spec in _methods_for(cfg, seed):
            fit = _fit_annotated(spec, cfg, train, seed, stream(seed, f"fit/{spec.tag}"))
            top = max(sweep) if fit.max_B is None else min(max(sweep), fit.max_B)
            r = stream(seed, f"predict/{spec.tag}")
            t0 = time.perf_counter()
            # one call, so both sets see the same bootstrap draws; separate calls would give the
            # detector a difference between draw sets to learn even when the inputs match
            ens = fit.predict(np.vstack([test_in.x[perm_in], test_out.x[perm_out]]), top, r)
            ens_in = G.PredictionEnsemble(ens.samples[:, :n_test], ens.logits[:, :n_test])
            ens_out = G.PredictionEnsemble(ens.samples[:, n_test:], ens.logits[:, n_test:])
            times.append({"method": spec.tag, "seed": seed, "train_seconds": fit.train_seconds,
                          "predict_seconds": time.perf_counter() - t0})
            for b in (b for b in sweep if 2 <= b <= top):
                f_in = metrics.ood_features(ens_in.samples[:b], ens_in.logits[:b])
                f_out = metrics.ood_features(ens_out.samples[:b], ens_out.logits[:b])
                (val_in, eval_in), (val_out, eval_out) = _split_half(f_in), _split_half(f_out)
                det = metrics.fit_detector(val_in, val_out)
                dm = metrics.detection_metrics(det.score(eval_in), det.score(eval_out))
                rows.append({"method": spec.tag, "seed": seed, "B": b, **asdict(dm)})
                for split, feats in (("in", f_in), ("out", f_out)):
                    s = feats[:, 1]
                    stds.append({"method": spec.tag, "seed": seed, "B": b, "split": split,
                                 "mean_logit_std": s.mean(), "median_logit_std": np.median(s),
                                 "q10_logit_std": np.quantile(s, 0.1), "q90_logit_std": np.quantile(s, 0.9),
                                 "mean_max_prob": feats[:, 0].mean()})
        return {"detection": rows, "logit_std": stds, "timings": times}

    tables, timings = _collect(_fan_out(cfg, per_seed), ["detection", "logit_std"])
    summary = {}
    for spec in cfg.methods:
        for b in sweep:
            rows = [r for r in tables["detection"] if r["method"] == spec.tag and r["B"] == b]
            if rows:
                summary[f"{spec.tag}/B={b}"] = {k: float(np.mean([r[k] for r in rows])) for k in
                                                ("tnr_at_tpr95", "auroc", "aupr_in", "aupr_out",
                                                 "detection_accuracy")}
    return _record(cfg, tables, timings, summary)


# -- imbalanced classes ------------------------------------------------------------------

def run_imbalanced(cfg: ExperimentConfig) -> RunRecord:
    """Per-class F1 on a balanced test set after training on skewed class counts."""
    ds = dict(cfg.dataset)
    name, n = ds.pop("name", "imbalanced_gaussians"), ds.pop("n", 0)
    try:
        params = D.ClassificationParams(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in ds.items()})
    except TypeError as exc:
        raise ConfigError(f"bad dataset parameters: {exc}") from exc
    if params.counts is None:
        raise ConfigError("imbalanced runs need dataset.counts")
    counts = params.counts
    test_params = replace(params, counts=(cfg.param("n_test_per_class"),) * params.k, label_noise=0.0)

    def per_seed(seed):
        rng = stream(seed, "data")
        train = D.synth_classification(name, n, params, rng)
        test = D.synth_classification(name, 0, test_params, rng)
        rows, times = [], []
        for spec in _methods_for(cfg, seed):
            fit = _fit_annotated(spec, cfg, train, seed, stream(seed, f"fit/{spec.tag}"))
            t0 = time.perf_counter()
            ens = fit.predict(test.x, spec.B or cfg.B, stream(seed, f"predict/{spec.tag}"))
            times.append({"method": spec.tag, "seed": seed, "train_seconds": fit.train_seconds,
                          "predict_seconds": time.perf_counter() - t0})
            f1 = metrics.per_class_f1(ens.mean().argmax(axis=1), test.y, params.k)
            for c in range(params.k):
                rows.append({"method": spec.tag, "seed": seed, "class": c, "train_count": counts[c], "f1": f1[c]})
        return {"f1": rows, "timings": times}

    tables, timings = _collect(_fan_out(cfg, per_seed), ["f1"])
    minority, majority = int(np.argmin(counts)), int(np.argmax(counts))
    summary = {}
    for spec in cfg.methods:
        rows = [r for r in tables["f1"] if r["method"] == spec.tag]
        if not rows:
            continue
        f1 = np.array([r["f1"] for r in rows]).reshape(-1, params.k)
        summary[spec.tag] = {"mean_f1": f1.mean(axis=0).tolist(), "std_f1": f1.std(axis=0).tolist(),
                             "minority_f1": float(f1[:, minority].mean()),
                             "majority_f1": float(f1[:, majority].mean())}
    return _record(cfg, tables, timings, summary)


# -- speed benchmark ----------------------------------------------------------------------

def _best_time(fn, repeats):
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_bench_speed(cfg: ExperimentConfig) -> RunRecord:
    """Cached NeuBoots prediction against naive and MC-dropout passes, plus training overhead.

    Cache soundness is checked before anything is timed; a mismatch aborts
    the run. ``timings.csv`` holds the seconds; the ``soundness`` table is
    the reproducible part.
    """
    depth, width, p_in, k = cfg.param("depth"), cfg.param("width"), cfg.param("input_dim"), cfg.param("k")
    repeats = cfg.param("repeats")
    sizes = (p_in, *([width] * depth), k)
    arch = ArchSpec(sizes, cfg.arch.activations, "softmax", cfg.arch.gain)
    B = cfg.B

    def per_seed(seed):
        rng = stream(seed, "bench")
        gen = G.GeneratorNet(arch.init(rng))
        x = rng.standard_normal((cfg.param("n_inputs"), p_in))
        alphas = G.draw_alphas(gen.S, B, rng)
        cached = G.predict_bootstrap(gen, x, B, rng, alphas=alphas)
        naive = G.predict_bootstrap_naive(gen, x, B, rng, alphas=alphas)
        gap = float(np.max(np.abs(cached.samples - naive.samples)))
        if not gap <= 1e-12:
            raise NumericalError(f"cache soundness violated: max gap {gap:g}")
        drop = DropoutPredictor(gen.net, cfg.param("p"))
        times = {
            "neuboots_cached": _best_time(lambda: G.predict_bootstrap(gen, x, B, rng, alphas=alphas), repeats),
            "neuboots_naive": _best_time(lambda: G.predict_bootstrap_naive(gen, x, B, rng, alphas=alphas), repeats),
            "mc_dropout": _best_time(lambda: mc_dropout_predict(drop, x, B, rng), repeats),
        }
        n_train = cfg.param("n_train")
        xt = rng.standard_normal((n_train, p_in))
        yt = rng.integers(0, k, n_train)
        u = assign_blocks(yt, gen.S, rng)
        sgd = replace(cfg.sgd, epochs=cfg.param("train_epochs"))
        epochs = sgd.epochs
        times["train_neuboots_epoch"] = _best_time(
            lambda: G.train(gen, xt, yt, u, sgd, stream(seed, "train")), repeats) / epochs
        times["train_plain_epoch"] = _best_time(
            lambda: nn.train_loop(gen.net.copy(), xt, yt, sgd, stream(seed, "train"), "cross_entropy"),
            repeats) / epochs
        timing_rows = [{"seed": seed, "path": path, "B": B, "seconds": s} for path, s in times.items()]
        return {"soundness": [{"seed": seed, "B": B, "max_abs_gap": gap}], "timings": timing_rows}

    tables, timings = _collect(_fan_out(cfg, per_seed), ["soundness"])

    def mean_of(path):
        return float(np.mean([t["seconds"] for t in timings if t["path"] == path]))
    summary = {
        "speedup_vs_mc_dropout": mean_of("mc_dropout") / mean_of("neuboots_cached"),
        "speedup_vs_naive": mean_of("neuboots_naive") / mean_of("neuboots_cached"),
        "train_overhead": mean_of("train_neuboots_epoch") / mean_of("train_plain_epoch") - 1.0,
        "seconds": {p: mean_of(p) for p in dict.fromkeys(t["path"] for t in timings)},
    }
    return _record(cfg, tables, timings, summary)


RUNNERS = {
    "regression_coverage": run_regression_coverage,
    "calibration": run_calibration,
    "active_learning": run_active_learning,
    "ood": run_ood,
    "imbalanced": run_imbalanced,
    "bench_speed": run_bench_speed,
}


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> RunRecord:
    record = RUNNERS[cfg.kind](cfg)
    if write and cfg.output_dir:
        write_record(record, cfg.output_dir)
    return record
