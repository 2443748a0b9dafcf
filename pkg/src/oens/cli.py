"""``oens`` command line.

Summaries go to stdout as one JSON line; logs go to stderr (level from
``OENS_LOG``: error, info or debug).  Exit codes: 0 success, 1 invalid
configuration or input, 2 numerical abort, 3 sweep finished with
quarantined cells.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import checkpoint
from .datasets import gen_ambiguous, gen_clustered_classes, write_csv, write_stats
from .ensemble import Ensemble
from .errors import ConfigError, NumericalError, OensError
from .gradcheck import run_gradcheck
from .harness import ExperimentConfig, RunRecord, emit_specialization_report, load_splits, run_experiment
from .trainers import TrainConfig, evaluate, train

log = logging.getLogger("oens")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_PARTIAL = 0, 1, 2, 3

DEFAULT_CLUSTERED = {
    "input_dim": 16,
    "class_count": 10,
    "cluster_spread": 1.0,
    "confusable_pairs": [[0, 1], [2, 3], [4, 5]],
    "pair_separation": 0.5,
}
DEFAULT_AMBIGUOUS = {"input_dim": 8, "mode_count": 2, "mode_priors": [0.5, 0.5]}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _configure_logging() -> None:
    level = os.environ.get("OENS_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.INFO), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def data_descriptor(data: str, test_data: str | None = None, label_column: str = "label") -> dict:
    """Turn a ``--data`` value into a harness dataset descriptor.

    Accepted forms: ``synthetic:clustered``, ``synthetic:ambiguous``,
    ``idx:train_images,train_labels[,test_images,test_labels]`` or a CSV path.
    """
    if data.startswith("synthetic:"):
        name = data.split(":", 1)[1]
        params = {"clustered": DEFAULT_CLUSTERED, "ambiguous": DEFAULT_AMBIGUOUS}.get(name)
        if params is None:
            raise ConfigError(f"unknown synthetic generator {name!r}")
        return {"generator": name, "params": dict(params)}
    if data.startswith("idx:"):
        paths = data[4:].split(",")
        if len(paths) not in (2, 4):
            raise ConfigError("idx data needs images,labels[,test_images,test_labels]")
        d = {"train_images": paths[0], "train_labels": paths[1]}
        if len(paths) == 4:
            d.update(test_images=paths[2], test_labels=paths[3])
        return {"idx": d}
    return {"csv": {"train": data, "test": test_data, "label_column": label_column}}


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, separators=(",", ":")) + "\n")
    sys.stdout.flush()


def cmd_train(args) -> int:
    cfg = _read_json(args.config) if args.config else {}
    unknown = set(cfg) - {"dataset", "train", "out"}
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    tc = dict(cfg.get("train", {}))
    overrides = {
        "method": args.method, "member_count": args.members, "k": args.k,
        "total_iterations": args.iterations, "batch_size": args.batch_size, "seed": args.seed,
        "mcl_meta_iterations": args.meta_iterations, "mcl_inner_iterations": args.inner_iterations,
        "log_interval": args.log_interval,
    }
    tc.update({k: v for k, v in overrides.items() if v is not None})
    if args.hidden is not None:
        tc["hidden"] = [int(h) for h in args.hidden.split(",") if h]
    opt = dict(tc.get("optimizer", {}))
    for key, val in (("learning_rate", args.lr), ("momentum", args.momentum), ("weight_decay", args.weight_decay)):
        if val is not None:
            opt[key] = val
    tc["optimizer"] = opt
    config = TrainConfig.from_dict(tc)

    if args.data is not None:
        descriptor = data_descriptor(args.data, args.test_data, args.label_column)
    elif "dataset" in cfg:
        descriptor = cfg["dataset"]
    else:
        raise ConfigError("no dataset: pass --data or a config with a 'dataset' entry")
    out = Path(args.out or cfg.get("out") or "train_out")

    init = checkpoint.load(args.init_from) if args.init_from else None
    train_set, probe_set, test_set = load_splits(descriptor, config.seed)
    log.info("training %s: M=%d k=%d on %d examples", config.method, config.member_count, config.k, len(train_set))
    ens, history = train(config, train_set, probe_set, init)
    report = evaluate(ens, test_set)

    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(ens, out / "ensemble.oens")
    (out / "history.csv").write_text(history.to_csv())
    rec = RunRecord("train", config.to_dict(), descriptor, config.seed, report, history)
    (out / "record.json").write_text(json.dumps(rec.to_dict(), indent=2))
    _emit(report.to_dict())
    return EXIT_OK


def cmd_eval(args) -> int:
    ens: Ensemble = checkpoint.load(args.ensemble)
    descriptor = data_descriptor(args.data, args.test_data, args.label_column)
    _, _, test_set = load_splits(descriptor, args.seed if args.seed is not None else 0)
    if test_set.input_dim != ens.input_dim or test_set.class_count > ens.num_classes:
        raise ConfigError(f"checkpoint expects {ens.input_dim} features / {ens.num_classes} classes, "
                          f"data has {test_set.input_dim} / {test_set.class_count}")
    test_set.class_count = ens.num_classes
    report = evaluate(ens, test_set)
    if args.specialization:
        rec = RunRecord(Path(args.ensemble).stem, {"k": 1}, descriptor, args.seed or 0, report)
        Path(args.specialization).write_text(json.dumps(emit_specialization_report(rec), indent=2))
    _emit(report.to_dict())
    return EXIT_OK


def cmd_sweep(args) -> int:
    raw = _read_json(args.config)
    if args.out:
        raw["output_dir"] = args.out
    if args.seed is not None:
        raw["replicate_seeds"] = [args.seed]
    config = ExperimentConfig.from_dict(raw)
    records = run_experiment(config, jobs=args.jobs)
    failed = [r for r in records if not r.ok]
    for r in failed:
        log.error("quarantined %s: %s", r.cell_id, r.error)
    _emit({"cells": len(records), "failed": [r.cell_id for r in failed], "output_dir": config.output_dir})
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_gradcheck(args) -> int:
    result = run_gradcheck(args.trials, args.seed or 0, args.tolerance)
    _emit(result.to_dict())
    return EXIT_OK if result.passed else EXIT_CONFIG


def _pairs(text: str) -> list[list[int]]:
    out = []
    for chunk in filter(None, text.split(",")):
        a, _, b = chunk.partition("-")
        out.append([int(a), int(b)])
    return out


def cmd_gen_data(args) -> int:
    seed = args.seed or 0
    if args.generator == "ambiguous":
        priors = [float(p) for p in args.priors.split(",")] if args.priors else None
        modes = args.modes or (len(priors) if priors else 2)
        params = {"input_dim": args.input_dim, "mode_count": modes, "mode_priors": priors}
        ds = gen_ambiguous(seed, args.n, split=args.split, **params)
    else:
        params = {"input_dim": args.input_dim, "class_count": args.classes, "cluster_spread": args.spread,
                  "confusable_pairs": _pairs(args.pairs), "pair_separation": args.separation}
        ds = gen_clustered_classes(seed, args.n, split=args.split, **params)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(ds, out)
    stats_path = out.with_name(out.name + ".stats.json")
    write_stats(ds, stats_path, generator=args.generator, seed=seed, params=params)
    _emit({"out": str(out), "stats": str(stats_path), "n": len(ds), "class_count": ds.class_count})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="oens", description="Train and evaluate oracle-loss ensembles.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    t = sub.add_parser("train", help="train one ensemble")
    t.add_argument("--config")
    t.add_argument("--method", choices=["smcl", "mcl", "independent", "dey"])
    t.add_argument("--members", type=int)
    t.add_argument("--k", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--hidden", help="comma-separated hidden widths, e.g. 32 or 64,32")
    t.add_argument("--meta-iterations", type=int)
    t.add_argument("--inner-iterations", type=int)
    t.add_argument("--log-interval", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--data")
    t.add_argument("--test-data")
    t.add_argument("--label-column", default="label")
    t.add_argument("--init-from", help="checkpoint to fine-tune from")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="oracle metrics for a checkpoint")
    e.add_argument("--ensemble", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--test-data")
    e.add_argument("--label-column", default="label")
    e.add_argument("--specialization", help="write the per-class winner report here")
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="run an experiment grid")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--seed", type=int, help="replace replicate_seeds with this single seed")
    s.set_defaults(func=cmd_sweep)

    g = sub.add_parser("gradcheck", help="randomised finite-difference gradient check")
    g.add_argument("--trials", type=int, default=100)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("gen-data", help="write a synthetic dataset as CSV")
    d.add_argument("--generator", choices=["ambiguous", "clustered"], required=True)
    d.add_argument("--n", type=int, default=4000)
    d.add_argument("--input-dim", type=int, default=16)
    d.add_argument("--classes", type=int, default=10)
    d.add_argument("--modes", type=int)
    d.add_argument("--priors")
    d.add_argument("--spread", type=float, default=1.0)
    d.add_argument("--pairs", default="", help="confusable pairs, e.g. 0-1,2-3")
    d.add_argument("--separation", type=float, default=0.5)
    d.add_argument("--split", default="train")
    d.add_argument("--seed", type=int)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    _configure_logging()
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except NumericalError as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_NUMERICAL
    except (OensError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
