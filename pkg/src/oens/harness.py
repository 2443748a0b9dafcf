"""Sweeps over (method, ensemble size, k, seed) and their report files.

Experiment config JSON::

    {
      "dataset": {"generator": "clustered", "params": {...},
                  "n_train": 4000, "n_test": 2000, "n_probe": 1000, "seed": 0},
      "methods": ["smcl", "independent"],
      "ensemble_sizes": [1, 2, 3, 4],
      "k_values": [1],
      "replicate_seeds": [0, 1, 2],
      "train": {"batch_size": 64, "total_iterations": 1500, "hidden": [32],
                "optimizer": {"learning_rate": 0.05, "momentum": 0.9}},
      "output_dir": "sweep_out"
    }

``dataset`` may instead be ``{"csv": {"train": ..., "test": ..., "label_column": "label"}}``
or ``{"idx": {"train_images": ..., "train_labels": ..., "test_images": ..., "test_labels": ...}}``.
Synthetic datasets without an explicit ``seed`` are regenerated from each
replicate seed.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from .datasets import Dataset, gen_ambiguous, gen_clustered_classes, load_csv, load_idx
from .ensemble import Ensemble, OracleReport
from .errors import ConfigError
from .trainers import METHODS, TrainConfig, TrainHistory, evaluate, train

log = logging.getLogger(__name__)

# Oracle accuracy (%) on CIFAR10 by ensemble size, read off the published
# ensemble-size figure.  Documentation only: full-scale CIFAR training is not
# reproduced here.
PUBLISHED_CIFAR10_ORACLE_ACCURACY = {
    "smcl": {1: 77.11, 2: 85.47, 3: 88.65, 4: 93.1, 5: 94.29, 6: 96.2},
    "mcl": {1: 77.22, 2: 84.69, 3: 88.44, 4: 92.09, 5: 94.64, 6: 95.53},
    "dey": {1: 77.11, 2: 83.3, 3: 86.04, 4: 87.35, 5: 88.25, 6: 88.84},
    "independent": {1: 77.11, 2: 83.03, 3: 86.58, 4: 88.51, 5: 90.09, 6: 92.33},
}

SWEEP_COLUMNS = ["method", "M", "k", "seed", "oracle_accuracy", "oracle_loss", "wall_clock"]
SUMMARY_COLUMNS = ["method", "M", "k", "seeds", "mean_oracle_accuracy", "mean_oracle_loss", "mean_wall_clock"]

SPECIALIZATION_SCHEMA = {
    "type": "object",
    "required": ["cell_id", "split", "member_count", "class_count", "winner_distribution",
                 "specialization_entropy", "members"],
    "properties": {
        "cell_id": {"type": "string"},
        "split": {"type": "string"},
        "member_count": {"type": "integer", "minimum": 1},
        "class_count": {"type": "integer", "minimum": 1},
        "winner_distribution": {
            "type": "array",
            "items": {"type": "array", "items": {"type": ["number", "null"], "minimum": 0, "maximum": 100}},
        },
        "specialization_entropy": {"type": ["number", "null"], "minimum": 0},
        "members": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["member", "top_class", "top_class_share", "majority_classes"],
                "properties": {
                    "member": {"type": "integer"},
                    "top_class": {"type": ["integer", "null"]},
                    "top_class_share": {"type": ["number", "null"]},
                    "majority_classes": {"type": "array", "items": {"type": "integer"}},
                },
            },
        },
    },
}


@dataclass
class ExperimentConfig:
    dataset: dict
    methods: list[str]
    ensemble_sizes: list[int]
    k_values: list[int] = field(default_factory=lambda: [1])
    replicate_seeds: list[int] = field(default_factory=lambda: [0])
    train: dict = field(default_factory=dict)
    output_dir: str | None = None

    def __post_init__(self):
        if not self.methods or any(m not in METHODS for m in self.methods):
            raise ConfigError(f"methods must be drawn from {METHODS}")
        if not self.ensemble_sizes or not self.k_values:
            raise ConfigError("ensemble_sizes and k_values must be non-empty")
        if any(m < 1 for m in self.ensemble_sizes) or any(k < 1 for k in self.k_values):
            raise ConfigError("ensemble sizes and k values must be positive")
        if max(self.k_values) > min(self.ensemble_sizes):
            raise ConfigError(f"every k must be <= every ensemble size (max k {max(self.k_values)}, "
                              f"min M {min(self.ensemble_sizes)})")
        if not self.replicate_seeds:
            raise ConfigError("need at least one replicate seed")
        reserved = {"method", "member_count", "k", "seed"} & set(self.train)
        if reserved:
            raise ConfigError(f"train template may not set {sorted(reserved)}; they come from the sweep axes")
        # fail early on typos in the template
        TrainConfig.from_dict({**self.train, "method": self.methods[0], "member_count": 1, "k": 1})

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        if "dataset" not in d or "methods" not in d or "ensemble_sizes" not in d:
            raise ConfigError("experiment config needs dataset, methods and ensemble_sizes")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def cells(self) -> list[dict]:
        out = []
        for method in self.methods:
            for M in self.ensemble_sizes:
                for k in self.k_values:
                    for seed in self.replicate_seeds:
                        tc = {**copy.deepcopy(self.train), "method": method, "member_count": M, "k": k, "seed": seed}
                        out.append({"cell_id": cell_id(method, M, k, seed), "train_config": tc,
                                    "dataset": copy.deepcopy(self.dataset)})
        return out


def cell_id(method: str, M: int, k: int, seed: int) -> str:
    return f"{method}-M{M}-k{k}-s{seed}"


@dataclass
class RunRecord:
    cell_id: str
    config: dict
    dataset: dict
    seed: int
    report: OracleReport | None = None
    history: TrainHistory | None = None
    wall_clock_seconds: float = math.nan
    engine_version: str = __version__
    status: str = "ok"
    error: str | None = None
    ensemble: Ensemble | None = field(default=None, repr=False, compare=False)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict:
        return {
            "cell_id": self.cell_id,
            "config": self.config,
            "dataset": self.dataset,
            "seed": self.seed,
            "report": self.report.to_dict() if self.report else None,
            "history": self.history.to_dict() if self.history else None,
            "wall_clock_seconds": self.wall_clock_seconds,
            "engine_version": self.engine_version,
            "status": self.status,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(
            cell_id=d["cell_id"], config=d["config"], dataset=d["dataset"], seed=d["seed"],
            report=OracleReport.from_dict(d["report"]) if d.get("report") else None,
            history=TrainHistory.from_dict(d["history"]) if d.get("history") else None,
            wall_clock_seconds=d["wall_clock_seconds"], engine_version=d["engine_version"],
            status=d["status"], error=d.get("error"),
        )


_SPLIT_CACHE: dict[str, tuple[Dataset, Dataset, Dataset]] = {}


def load_splits(descriptor: dict, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """(train, probe, test) for a dataset descriptor; synthetic splits share class structure."""
    key = json.dumps([descriptor, seed], sort_keys=True)
    if key in _SPLIT_CACHE:
        return _SPLIT_CACHE[key]
    n_probe = int(descriptor.get("n_probe", 1000))
    if "generator" in descriptor:
        gen = descriptor["generator"]
        params = dict(descriptor.get("params", {}))
        data_seed = int(descriptor.get("seed", seed))
        n_train = int(descriptor.get("n_train", 4000))
        n_test = int(descriptor.get("n_test", 2000))
        if gen == "ambiguous":
            make = gen_ambiguous
        elif gen == "clustered":
            make = gen_clustered_classes
        else:
            raise ConfigError(f"unknown generator {gen!r}")
        try:
            splits = (make(data_seed, n_train, split="train", **params),
                      make(data_seed, n_probe, split="probe", **params),
                      make(data_seed, n_test, split="test", **params))
        except TypeError as exc:
            raise ConfigError(f"bad {gen} generator params: {exc}") from exc
    elif "csv" in descriptor:
        d = descriptor["csv"]
        col = d.get("label_column", "label")
        tr = load_csv(d["train"], col, split="train")
        te = load_csv(d["test"], col, class_count=tr.class_count, split="test") if d.get("test") else tr
        if te.class_count > tr.class_count:
            tr.class_count = te.class_count
        splits = (tr, te.take(range(min(n_probe, len(te))), "probe"), te)
    elif "idx" in descriptor:
        d = descriptor["idx"]
        tr = load_idx(d["train_images"], d["train_labels"], split="train", class_count=d.get("class_count"))
        te = tr
        if d.get("test_images"):
            te = load_idx(d["test_images"], d["test_labels"], stats=tr.stats, class_count=tr.class_count, split="test")
        splits = (tr, te.take(range(min(n_probe, len(te))), "probe"), te)
    else:
        raise ConfigError("dataset descriptor needs 'generator', 'csv' or 'idx'")
    _SPLIT_CACHE[key] = splits
    return splits


def run_cell(cell: dict) -> RunRecord:
    """Train and evaluate one sweep cell; failures come back as quarantined records."""
    tc = cell["train_config"]
    rec = RunRecord(cell["cell_id"], tc, cell["dataset"], int(tc.get("seed", 0)))
    try:
        config = TrainConfig.from_dict(tc)
        train_set, probe_set, test_set = load_splits(cell["dataset"], config.seed)
        start = time.perf_counter()
        ens, history = train(config, train_set, probe_set)
        rec.wall_clock_seconds = time.perf_counter() - start
        rec.report = evaluate(ens, test_set)
        rec.history = history
        rec.ensemble = ens
        rec.config = config.to_dict()
    except Exception as exc:  # quarantine, keep the sweep going
        rec.status = "failed"
        rec.error = f"{type(exc).__name__}: {exc}"
        log.error("cell %s failed: %s", rec.cell_id, rec.error)
        log.debug("%s", traceback.format_exc())
    return rec


def rerun(record: RunRecord) -> RunRecord:
    """Re-execute a record from its own config snapshot."""
    return run_cell({"cell_id": record.cell_id, "train_config": record.config, "dataset": record.dataset})


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> list[RunRecord]:
    cells = config.cells()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(run_cell, cells))
    else:
        records = [run_cell(c) for c in cells]
    records.sort(key=_sort_key)
    if config.output_dir:
        write_outputs(records, config.output_dir)
    return records


def _sort_key(r: RunRecord):
    c = r.config
    method = c.get("method", "")
    order = METHODS.index(method) if method in METHODS else len(METHODS)
    return (order, c.get("member_count", 0), c.get("k", 0), r.seed, r.cell_id)


def _fmt(x: float) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def emit_sweep_table(records: list[RunRecord]) -> str:
    """Per-cell rows, a blank line, then per-(method, M, k) means over seeds.

    Failed cells are left out of both blocks.
    """
    ok = sorted((r for r in records if r.ok), key=_sort_key)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    groups: dict[tuple, list[RunRecord]] = {}
    for r in ok:
        c = r.config
        w.writerow([c["method"], c["member_count"], c["k"], r.seed, _fmt(r.report.oracle_accuracy),
                    _fmt(r.report.oracle_loss), _fmt(r.wall_clock_seconds)])
        groups.setdefault((c["method"], c["member_count"], c["k"]), []).append(r)
    buf.write("\n")
    w.writerow(SUMMARY_COLUMNS)
    for (method, M, k), rs in groups.items():
        w.writerow([method, M, k, len(rs),
                    _fmt(float(np.mean([r.report.oracle_accuracy for r in rs]))),
                    _fmt(float(np.mean([r.report.oracle_loss for r in rs]))),
                    _fmt(float(np.mean([r.wall_clock_seconds for r in rs])))])
    return buf.getvalue()


def emit_specialization_report(record: RunRecord) -> dict:
    """Winner distribution, its entropy and each member's dominant classes."""
    if not record.ok or record.report is None:
        raise ConfigError(f"record {record.cell_id} has no evaluation")
    if record.config.get("k", 1) != 1:
        raise ConfigError("specialization reports need a k=1 record")
    dist = np.asarray(record.report.winner_distribution, dtype=np.float64)
    members = []
    for m in range(dist.shape[1]):
        col = dist[:, m]
        valid = ~np.isnan(col)
        top = int(np.argmax(np.where(valid, col, -1.0))) if valid.any() else None
        members.append({
            "member": m,
            "top_class": top,
            "top_class_share": None if top is None else float(col[top]),
            "majority_classes": [int(c) for c in np.flatnonzero(valid & (np.nan_to_num(col) > 50.0))],
        })
    rep = record.report.to_dict()
    return {
        "cell_id": record.cell_id,
        "split": record.report.split,
        "member_count": int(dist.shape[1]),
        "class_count": int(dist.shape[0]),
        "winner_distribution": rep["winner_distribution"],
        "specialization_entropy": rep["specialization_entropy"],
        "members": members,
    }


def compare_timing(records: list[RunRecord]) -> dict:
    """MCL / sMCL wall-clock ratio from a matched pair of records."""
    by_method = {r.config.get("method"): r for r in records if r.ok}
    missing = [m for m in ("smcl", "mcl") if m not in by_method]
    if missing:
        raise ConfigError(f"timing comparison is missing {missing} records")
    s, m = by_method["smcl"].wall_clock_seconds, by_method["mcl"].wall_clock_seconds
    return {"ratio": m / s, "mcl_seconds": m, "smcl_seconds": s}


def write_outputs(records: list[RunRecord], output_dir) -> None:
    root = Path(output_dir)
    runs = root / "runs"
    runs.mkdir(parents=True, exist_ok=True)
    for r in records:
        d = runs / r.cell_id
        d.mkdir(exist_ok=True)
        (d / "record.json").write_text(json.dumps(r.to_dict(), indent=2))
        if r.history is not None:
            (d / "history.csv").write_text(r.history.to_csv())
        if r.ensemble is not None:
            checkpoint.save(r.ensemble, d / "ensemble.oens")
    (root / "sweep.csv").write_text(emit_sweep_table(records))
    spec_reports = {r.cell_id: emit_specialization_report(r) for r in records if r.ok and r.config.get("k") == 1}
    (root / "specialization.json").write_text(json.dumps(spec_reports, indent=2))
    failed = [{"cell_id": r.cell_id, "error": r.error} for r in records if not r.ok]
    if failed:
        (root / "quarantine.json").write_text(json.dumps(failed, indent=2))
