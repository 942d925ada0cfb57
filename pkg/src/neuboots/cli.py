"""Command line: ``neuboots train | predict | experiment <kind> | bench``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
failure during training.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys

from . import data as D
from . import experiments as E
from . import generator as G
from . import metrics, nn, serialize
from .baselines import ArchSpec, DropoutPredictor, EnsembleOfNets, ensemble_predict, mc_dropout_predict
from .errors import ConfigError, DataError, NumericalError, ShapeError
from .weights import make_rng

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad arguments, which this tool reserves for data errors.
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def _add_sgd_flags(p):
    """SGD flags default to None so that only the ones given override a config."""
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float, help="decoupled, weights only")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--schedule", choices=nn.LR_SCHEDULES)


def _sgd_overrides(args) -> dict:
    pairs = {"learning_rate": args.lr, "momentum": args.momentum, "weight_decay": args.weight_decay,
             "batch_size": args.batch_size, "epochs": args.epochs, "lr_schedule": args.schedule}
    return {k: v for k, v in pairs.items() if v is not None}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="neuboots", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model on a CSV file and save it")
    t.add_argument("--data", required=True, help="headed CSV with features and a target column")
    t.add_argument("--label", default="y", help="target column (default: y)")
    t.add_argument("--task", choices=("regression", "classification"), default="classification")
    t.add_argument("--classes", type=_str_list, help="class names in index order, comma separated")
    t.add_argument("--method", choices=E.METHODS, default="neuboots")
    t.add_argument("--B", type=int, default=10, help="ensemble size for ensemble methods")
    t.add_argument("--p", type=float, default=0.1, help="dropout probability for mc_dropout")
    t.add_argument("--hidden", type=_int_list, default=[64, 64], help="hidden widths, e.g. 64,64")
    t.add_argument("--activations", type=_str_list, default=["relu"],
                   help="one activation, or one per hidden layer")
    t.add_argument("--gain", type=float, default=1.0, help="initialization scale")
    t.add_argument("--seed", type=int, default=0)
    _add_sgd_flags(t)
    t.add_argument("--out", required=True, help="model file to write")
    t.add_argument("--format", choices=("binary", "json"), default="binary")

    p = sub.add_parser("predict", help="bootstrap predictions for the rows of a CSV file")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--label", help="column to ignore if the file also holds targets")
    p.add_argument("--B", type=int, default=100)
    p.add_argument("--level", type=float, default=0.95, help="band level for regression models")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output CSV (default: stdout)")

    x = sub.add_parser("experiment", help="run an experiment from a JSON config")
    x.add_argument("kind", choices=E.KINDS)
    x.add_argument("--config", required=True, help="JSON experiment config")
    x.add_argument("--output-dir", help="where the CSV tables and run.json go")
    x.add_argument("--seeds", type=_int_list, help="replication seeds, e.g. 0,1,2")
    x.add_argument("--B", type=int, help="bootstrap or ensemble size")
    x.add_argument("--workers", type=int, help="threads for the seed fan-out")
    _add_sgd_flags(x)

    b = sub.add_parser("bench", help="prediction and training speed of NeuBoots against MC dropout")
    b.add_argument("--config", help="optional bench_speed config; flags override it")
    b.add_argument("--B", type=int)
    b.add_argument("--depth", type=int)
    b.add_argument("--width", type=int)
    b.add_argument("--repeats", type=int)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--output-dir")
    return parser


# -- commands ------------------------------------------------------------------------

def _train(args) -> int:
    schema = D.CsvSchema(args.label, args.task, classes=tuple(args.classes) if args.classes else None)
    data = D.load_csv_dataset(args.data, schema)
    try:
        sgd = nn.SgdConfig(**_sgd_overrides(args), seed=args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    acts = args.activations[0] if len(args.activations) == 1 else tuple(args.activations)
    output = "softmax" if data.task == "classification" else "identity"
    arch = ArchSpec((data.p, *args.hidden, data.out_dim), acts, output, args.gain)
    try:
        arch.init(make_rng(0))
    except (ShapeError, ValueError) as exc:
        raise ConfigError(f"bad architecture: {exc}") from exc
    if args.method == "neuboots" and args.hidden[-1] > data.n:
        raise ConfigError(f"the last hidden width ({args.hidden[-1]}) is the block count and cannot exceed n={data.n}")
    spec = E.MethodSpec(args.method, B=args.B, p=args.p)
    fit = E.train_method(spec, arch, sgd, args.B, data, make_rng(args.seed))
    model = fit.model
    if args.method == "baseline":
        # a plain network is stored as a one-member deep ensemble
        model = EnsembleOfNets(nn.DenseNet.stack([model]), "deep_ensemble_plain")
    serialize.save_model(args.out, model, args.format)
    print(json.dumps({"model": str(args.out), "method": args.method, "n": data.n,
                      "train_seconds": round(fit.train_seconds, 3)}))
    return EXIT_OK


def _predict(args) -> int:
    model = serialize.load_model(args.model)
    net = model.stacked if isinstance(model, EnsembleOfNets) else model.net
    x, names = D.load_csv_features(args.data, drop=(args.label,) if args.label else ())
    if x.shape[1] != net.sizes[0]:
        raise DataError(f"model expects {net.sizes[0]} features, {args.data} has {x.shape[1]} ({', '.join(names)})")
    rng = make_rng(args.seed)
    if isinstance(model, G.GeneratorNet):
        ens = G.predict_bootstrap(model, x, args.B, rng)
    elif isinstance(model, DropoutPredictor):
        ens = mc_dropout_predict(model, x, args.B, rng)
    else:
        ens = ensemble_predict(model, x)
    rows = []
    if net.output == "softmax":
        feats = metrics.ood_features(ens.samples, ens.logits)
        mean = ens.mean()
        for i in range(len(x)):
            row = {f"p_{c}": mean[i, c] for c in range(mean.shape[1])}
            row.update(predicted=int(mean[i].argmax()), predictive_entropy=feats[i, 3], logit_std=feats[i, 1])
            rows.append(row)
    else:
        lower, upper, mean = G.confidence_band(ens.samples, args.level)
        for i in range(len(x)):
            row = {}
            for j in range(mean.shape[1]):
                sfx = "" if mean.shape[1] == 1 else f"_{j}"
                row.update({f"mean{sfx}": mean[i, j], f"lower{sfx}": lower[i, j], f"upper{sfx}": upper[i, j]})
            rows.append(row)
    if args.out:
        E.write_csv(args.out, rows)
    else:
        w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: E._cell(v) for k, v in r.items()})
    return EXIT_OK


def _apply_overrides(cfg: E.ExperimentConfig, args) -> E.ExperimentConfig:
    changes = {}
    if getattr(args, "output_dir", None) is not None:
        changes["output_dir"] = args.output_dir
    if getattr(args, "seeds", None) is not None:
        changes["seeds"] = args.seeds
        changes["methods"] = [dataclasses.replace(m, seeds=None) if m.seeds and not set(m.seeds) <= set(args.seeds)
                              else m for m in cfg.methods]
    if getattr(args, "B", None) is not None:
        changes["B"] = args.B
    if getattr(args, "workers", None) is not None:
        changes["workers"] = args.workers
    sgd = _sgd_overrides(args) if hasattr(args, "lr") else {}
    if sgd:
        try:
            changes["sgd"] = dataclasses.replace(cfg.sgd, **sgd)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if not changes:
        return cfg
    try:
        return dataclasses.replace(cfg, **changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _emit(record: E.RunRecord, cfg: E.ExperimentConfig):
    if cfg.output_dir:
        E.write_record(record, cfg.output_dir)
    print(json.dumps({"kind": record.kind, "config_hash": record.config_hash,
                      "output_dir": cfg.output_dir, "summary": E._jsonable(record.summary)}, indent=2))


def _experiment(args) -> int:
    cfg = E.load_config(args.config)
    if cfg.kind != args.kind:
        raise ConfigError(f"config {args.config} describes a {cfg.kind!r} run, not {args.kind!r}")
    cfg = _apply_overrides(cfg, args)
    _emit(E.run_experiment(cfg, write=False), cfg)
    return EXIT_OK


def _bench(args) -> int:
    if args.config:
        cfg = E.load_config(args.config)
        if cfg.kind != "bench_speed":
            raise ConfigError(f"bench needs a bench_speed config, got {cfg.kind!r}")
    else:
        cfg = E.ExperimentConfig("bench_speed", {}, [], B=100, seeds=[args.seed],
                                 sgd=nn.SgdConfig(learning_rate=0.01, epochs=2))
    params = dict(cfg.params)
    for key in ("depth", "width", "repeats"):
        if getattr(args, key) is not None:
            params[key] = getattr(args, key)
    cfg = dataclasses.replace(_apply_overrides(cfg, args), params=params)
    _emit(E.run_experiment(cfg, write=False), cfg)
    return EXIT_OK


COMMANDS = {"train": _train, "predict": _predict, "experiment": _experiment, "bench": _bench}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"neuboots: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ShapeError) as exc:
        print(f"neuboots: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        member = f" (ensemble member {exc.member})" if exc.member is not None else ""
        print(f"neuboots: numerical failure: {exc}{member}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
