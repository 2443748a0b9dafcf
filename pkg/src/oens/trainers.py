"""Ensemble training procedures.

* ``train_smcl`` -- stochastic multiple choice learning: each example's
  gradient goes only to its ``k`` lowest-loss members, decided per batch.
* ``train_mcl`` -- alternating partition / retrain coordinate descent.
* ``train_independent`` -- classical ensemble, members never interact.
* ``train_dey`` -- sequential training with accuracy-based example weights.

All four share the engine, the batch schedule and the member seeding rule
(member ``m`` is initialised from ``seed + m``), so degenerate settings
reduce to one another bit for bit.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .datasets import BatchPlan, Dataset
from .engine import (
    NetworkSpec,
    OptimizerConfig,
    ParameterSet,
    backward,
    forward,
    init_params,
    loss_softmax_xent,
    mlp,
    sgd_step,
)
from .ensemble import Ensemble, Member, assign_winners, build_report, member_predictions, oracle_loss, per_member_losses
from .errors import ConfigError, NumericalError

log = logging.getLogger(__name__)

METHODS = ("smcl", "mcl", "independent", "dey")


@dataclass
class TrainConfig:
    method: str = "smcl"
    member_count: int = 4
    k: int = 1
    batch_size: int = 64
    total_iterations: int = 1000
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    hidden: list[int] = field(default_factory=lambda: [32])
    mcl_meta_iterations: int = 5
    mcl_inner_iterations: int | None = None
    dey_weight_floor: float = 0.01
    loss_reduction: str = "mean"
    log_interval: int = 50

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        self.hidden = [int(h) for h in self.hidden]
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        for name in ("member_count", "batch_size", "total_iterations", "mcl_meta_iterations", "log_interval"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 1 <= self.k <= self.member_count:
            raise ConfigError(f"k must satisfy 1 <= k <= member_count (k={self.k}, member_count={self.member_count})")
        if self.mcl_inner_iterations is not None and self.mcl_inner_iterations < 1:
            raise ConfigError("mcl_inner_iterations must be positive")
        if not 0.0 < self.dey_weight_floor <= 1.0:
            raise ConfigError("dey_weight_floor must be in (0, 1]")
        if self.loss_reduction not in ("mean", "sum"):
            raise ConfigError("loss_reduction must be 'mean' or 'sum'")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden widths must be positive")

    @property
    def inner_iterations(self) -> int:
        if self.mcl_inner_iterations is not None:
            return self.mcl_inner_iterations
        return max(1, self.total_iterations // self.mcl_meta_iterations)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"] = self.optimizer.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainHistory:
    member_count: int
    records: list[dict] = field(default_factory=list)
    starved: list[tuple[int, int]] = field(default_factory=list)  # (epoch, member)

    def log(self, iteration: int, oracle: float, member_losses, lr: float) -> None:
        if self.records and iteration <= self.records[-1]["iteration"]:
            raise ValueError("history iterations must be strictly increasing")
        self.records.append({
            "iteration": int(iteration),
            "oracle_loss": float(oracle),
            "member_losses": [float(v) for v in member_losses],
            "learning_rate": float(lr),
        })

    def header(self) -> list[str]:
        return ["iteration", "oracle_loss"] + [f"member_{m}_loss" for m in range(self.member_count)] + ["learning_rate"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        for r in self.records:
            w.writerow([r["iteration"], repr(r["oracle_loss"])] + [repr(v) for v in r["member_losses"]] + [repr(r["learning_rate"])])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"member_count": self.member_count, "records": self.records, "starved": [list(s) for s in self.starved]}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHistory":
        return cls(d["member_count"], list(d["records"]), [tuple(s) for s in d.get("starved", [])])

    @property
    def final_oracle_loss(self) -> float:
        return self.records[-1]["oracle_loss"]


def network_for(config: TrainConfig, dataset: Dataset) -> NetworkSpec:
    return mlp(dataset.input_dim, config.hidden, dataset.class_count)


def initial_ensemble(config: TrainConfig, spec: NetworkSpec, init: Ensemble | None = None) -> Ensemble:
    """Fresh members seeded ``seed + m``, or deep copies of ``init`` for fine-tuning."""
    if init is None:
        return Ensemble([Member(spec, init_params(spec, config.seed + m)) for m in range(config.member_count)])
    if init.member_count != config.member_count:
        raise ConfigError(f"init ensemble has {init.member_count} members, config wants {config.member_count}")
    members = []
    for member in init.members:
        if member.spec != spec:
            raise ConfigError("init ensemble architecture does not match the training data / hidden widths")
        src = member.params
        members.append(Member(spec, ParameterSet({k: v.copy() for k, v in src.tensors.items()})))
    return Ensemble(members)


def _update(member: Member, trace, labels, weights, opt: OptimizerConfig, iteration: int, reduction: str) -> None:
    grads = backward(member.spec, member.params, trace, labels, weights, reduction)
    sgd_step(member.params, grads, opt, iteration)


def train_single_model(spec: NetworkSpec, params: ParameterSet, dataset: Dataset, plan: BatchPlan,
                       opt: OptimizerConfig, iterations: int, start_iteration: int = 0,
                       weights: np.ndarray | None = None, reduction: str = "mean",
                       subset: np.ndarray | None = None) -> ParameterSet:
    """Plain mini-batch SGD on one network, in place.

    ``subset`` restricts training to those example indices (the batch plan
    then shuffles positions within the subset); ``weights`` are per-example
    loss weights over the full dataset.
    """
    pool = np.arange(len(dataset)) if subset is None else np.asarray(subset, dtype=np.int64)
    if len(pool) == 0:
        return params
    for it in range(start_iteration, start_iteration + iterations):
        idx = pool[plan.indices(len(pool), it)]
        x, y = dataset.inputs[idx], dataset.labels[idx]
        _, trace = forward(spec, params, x)
        w = np.ones(len(idx)) if weights is None else weights[idx]
        grads = backward(spec, params, trace, y, w, reduction)
        sgd_step(params, grads, opt, it)
    return params


def _probe(history: TrainHistory, ensemble: Ensemble, probe_set: Dataset | None, iteration: int, lr: float) -> None:
    if probe_set is None:
        return
    losses = per_member_losses(ensemble, probe_set.inputs, probe_set.labels)
    history.log(iteration, oracle_loss(losses), losses.mean(axis=0), lr)


def _should_log(done: int, config: TrainConfig, total: int) -> bool:
    return done % config.log_interval == 0 or done == total


def _require_data(train_set: Dataset) -> None:
    if train_set is None or len(train_set) == 0:
        raise ConfigError("empty training set")


def train_smcl(config: TrainConfig, train_set: Dataset, probe_set: Dataset | None = None,
               init: Ensemble | None = None) -> tuple[Ensemble, TrainHistory]:
    """Winner-take-gradient SGD over all members at once.

    Per batch: forward every member, compute the B x M loss matrix, mark the
    ``k`` lowest-loss members of each example, then step each member on the
    examples it won.  A member that won nothing in a batch is not touched
    (no momentum or weight-decay step either).
    """
    _require_data(train_set)
    spec = network_for(config, train_set)
    ens = initial_ensemble(config, spec, init)
    history = TrainHistory(config.member_count)
    opt = config.optimizer
    plan = BatchPlan(config.seed, config.batch_size)
    bpe = plan.batches_per_epoch(len(train_set))
    epoch_wins = np.zeros(config.member_count, dtype=np.int64)
    _probe(history, ens, probe_set, 0, opt.lr_at(0))
    for it in range(config.total_iterations):
        x, y = _batch(plan, train_set, it)
        traces, cols = [], []
        for member in ens.members:
            logits, trace = forward(member.spec, member.params, x)
            traces.append(trace)
            cols.append(loss_softmax_xent(logits, y))
        assign = assign_winners(np.stack(cols, axis=1), config.k)
        epoch_wins += assign.sum(axis=0)
        for m, member in enumerate(ens.members):
            mask = assign[:, m]
            if not mask.any():
                continue
            try:
                _update(member, traces[m], y, mask.astype(np.float64), opt, it, config.loss_reduction)
            except NumericalError as exc:
                raise NumericalError(f"member {m}, iteration {it}: {exc}") from exc
        if (it + 1) % bpe == 0:
            _note_starved(history, epoch_wins, (it + 1) // bpe - 1)
            epoch_wins[:] = 0
        if _should_log(it + 1, config, config.total_iterations):
            _probe(history, ens, probe_set, it + 1, opt.lr_at(it))
    return ens, history


def _batch(plan: BatchPlan, dataset: Dataset, it: int):
    idx = plan.indices(len(dataset), it)
    return dataset.inputs[idx], dataset.labels[idx]


def _note_starved(history: TrainHistory, wins: np.ndarray, epoch: int) -> None:
    for m in np.flatnonzero(wins == 0):
        log.warning("member %d won no examples in epoch %d", m, epoch)
        history.starved.append((epoch, int(m)))


def train_independent(config: TrainConfig, train_set: Dataset, probe_set: Dataset | None = None,
                      init: Ensemble | None = None) -> tuple[Ensemble, TrainHistory]:
    """M separate SGD runs sharing one batch schedule, stepped in lockstep."""
    _require_data(train_set)
    spec = network_for(config, train_set)
    ens = initial_ensemble(config, spec, init)
    history = TrainHistory(config.member_count)
    opt = config.optimizer
    plan = BatchPlan(config.seed, config.batch_size)
    ones = None
    _probe(history, ens, probe_set, 0, opt.lr_at(0))
    for it in range(config.total_iterations):
        x, y = _batch(plan, train_set, it)
        if ones is None or len(ones) != len(y):
            ones = np.ones(len(y))
        for m, member in enumerate(ens.members):
            _, trace = forward(member.spec, member.params, x)
            try:
                _update(member, trace, y, ones, opt, it, config.loss_reduction)
            except NumericalError as exc:
                raise NumericalError(f"member {m}, iteration {it}: {exc}") from exc
        if _should_log(it + 1, config, config.total_iterations):
            _probe(history, ens, probe_set, it + 1, opt.lr_at(it))
    return ens, history


def train_mcl(config: TrainConfig, train_set: Dataset, probe_set: Dataset | None = None,
              init: Ensemble | None = None) -> tuple[Ensemble, TrainHistory]:
    """Coordinate descent: train each member on its partition, then reassign.

    The first partition is round-robin by example index.  Each meta-iteration
    gives every member ``inner_iterations`` SGD steps on its own examples;
    member ``m`` shuffles with its own batch substream and keeps one running
    iteration counter across meta-iterations.  Reassignment sends each
    training example to its ``k`` lowest-loss members.
    """
    _require_data(train_set)
    spec = network_for(config, train_set)
    ens = initial_ensemble(config, spec, init)
    history = TrainHistory(config.member_count)
    opt = config.optimizer
    M, inner = config.member_count, config.inner_iterations
    plans = [BatchPlan(config.seed, config.batch_size, substream=m) for m in range(M)]
    n = len(train_set)
    partitions = [np.arange(m, n, M) for m in range(M)]
    _probe(history, ens, probe_set, 0, opt.lr_at(0))
    for t in range(config.mcl_meta_iterations):
        start = t * inner
        for m, member in enumerate(ens.members):
            if len(partitions[m]) == 0:
                log.warning("MCL meta-iteration %d: member %d has no assigned examples", t, m)
                history.starved.append((t, m))
                continue
            try:
                train_single_model(member.spec, member.params, train_set, plans[m], opt, inner, start,
                                   reduction=config.loss_reduction, subset=partitions[m])
            except NumericalError as exc:
                raise NumericalError(f"member {m}, meta-iteration {t}: {exc}") from exc
        assign = assign_winners(per_member_losses(ens, train_set.inputs, train_set.labels), config.k)
        partitions = [np.flatnonzero(assign[:, m]) for m in range(M)]
        log.debug("MCL meta-iteration %d partition sizes %s", t, [len(p) for p in partitions])
        _probe(history, ens, probe_set, start + inner, opt.lr_at(start + inner - 1))
    return ens, history


def dey_weights(ensemble: Ensemble, dataset: Dataset, floor: float) -> np.ndarray:
    """``max(floor, 1 - s_i)`` with ``s_i`` = 1 if any member already gets example ``i`` right."""
    preds = member_predictions(ensemble, dataset.inputs)
    covered = (preds == dataset.labels[:, None]).any(axis=1)
    return np.maximum(floor, 1.0 - covered.astype(np.float64))


def train_dey(config: TrainConfig, train_set: Dataset, probe_set: Dataset | None = None,
              init: Ensemble | None = None) -> tuple[Ensemble, TrainHistory]:
    """Sequential boosting-style ensemble.

    Member ``m`` trains for ``total_iterations`` steps with each example's
    loss weighted by how badly members ``0..m-1`` cover it; the batch
    gradient is the weighted mean.
    """
    _require_data(train_set)
    spec = network_for(config, train_set)
    ens = initial_ensemble(config, spec, init)
    history = TrainHistory(config.member_count)
    opt = config.optimizer
    plan = BatchPlan(config.seed, config.batch_size)
    T = config.total_iterations
    weights = np.ones(len(train_set))
    _probe(history, ens, probe_set, 0, opt.lr_at(0))
    for m, member in enumerate(ens.members):
        if m > 0:
            weights = dey_weights(ens.subset(range(m)), train_set, config.dey_weight_floor)
            log.debug("Dey member %d: mean weight %.4f", m, weights.mean())
        try:
            train_single_model(member.spec, member.params, train_set, plan, opt, T,
                               weights=weights, reduction=config.loss_reduction)
        except NumericalError as exc:
            raise NumericalError(f"member {m}: {exc}") from exc
        if probe_set is not None:
            losses = per_member_losses(ens, probe_set.inputs, probe_set.labels)
            history.log((m + 1) * T, oracle_loss(losses[:, :m + 1]), losses.mean(axis=0), opt.lr_at(T - 1))
    return ens, history


TRAINERS = {
    "smcl": train_smcl,
    "mcl": train_mcl,
    "independent": train_independent,
    "dey": train_dey,
}


def train(config: TrainConfig, train_set: Dataset, probe_set: Dataset | None = None,
          init: Ensemble | None = None) -> tuple[Ensemble, TrainHistory]:
    return TRAINERS[config.method](config, train_set, probe_set, init)


def evaluate(ensemble: Ensemble, test_set: Dataset):
    """Oracle report on the full test split."""
    return build_report(ensemble, test_set.inputs, test_set.labels, test_set.class_count, test_set.split_tag)
