"""Ensembles, winner assignment and oracle metrics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .engine import NetworkSpec, ParameterSet, forward, loss_softmax_xent
from .errors import ConfigError, ShapeError


@dataclass
class Member:
    spec: NetworkSpec
    params: ParameterSet


@dataclass
class Ensemble:
    members: list[Member]

    def __post_init__(self):
        if not self.members:
            raise ConfigError("an ensemble needs at least one member")
        d, c = self.members[0].spec.input_dim, self.members[0].spec.num_classes
        for m, member in enumerate(self.members):
            if member.spec.input_dim != d or member.spec.num_classes != c:
                raise ShapeError(f"member {m} does not share input dim {d} / class count {c}")

    @property
    def member_count(self) -> int:
        return len(self.members)

    @property
    def input_dim(self) -> int:
        return self.members[0].spec.input_dim

    @property
    def num_classes(self) -> int:
        return self.members[0].spec.num_classes

    def subset(self, indices) -> "Ensemble":
        return Ensemble([self.members[i] for i in indices])


def member_logits(ensemble: Ensemble, inputs, chunk: int = 2048) -> list[np.ndarray]:
    inputs = np.asarray(inputs, dtype=np.float64)
    out = []
    for member in ensemble.members:
        parts = [forward(member.spec, member.params, inputs[s:s + chunk])[0] for s in range(0, len(inputs), chunk)]
        out.append(np.concatenate(parts) if parts else np.zeros((0, ensemble.num_classes)))
    return out


def per_member_losses(ensemble: Ensemble, inputs, labels) -> np.ndarray:
    """B x M matrix of cross-entropy losses, column m from member m."""
    cols = [loss_softmax_xent(logits, labels) for logits in member_logits(ensemble, inputs)]
    return np.stack(cols, axis=1)


def assign_winners(losses, k: int = 1) -> np.ndarray:
    """0/1 matrix marking the ``k`` lowest-loss members of each row.

    Ties go to the lower member index (stable sort), so the result is a
    deterministic function of ``losses``.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 2:
        raise ShapeError("loss matrix must be 2-D")
    M = losses.shape[1]
    if not 1 <= k <= M:
        raise ConfigError(f"k={k} must satisfy 1 <= k <= M={M}")
    order = np.argsort(losses, axis=1, kind="stable")[:, :k]
    out = np.zeros(losses.shape, dtype=np.int8)
    np.put_along_axis(out, order, 1, axis=1)
    return out


def oracle_loss(losses) -> float:
    """Mean over examples of the smallest member loss."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ShapeError("empty loss matrix")
    return float(losses.min(axis=1).mean())


def member_predictions(ensemble: Ensemble, inputs) -> np.ndarray:
    """B x M argmax predictions."""
    return np.stack([lg.argmax(axis=1) for lg in member_logits(ensemble, inputs)], axis=1)


def oracle_accuracy(ensemble: Ensemble, inputs, labels) -> float:
    """Fraction of examples that at least one member classifies correctly."""
    labels = np.asarray(labels)
    preds = member_predictions(ensemble, inputs)
    return float(np.mean((preds == labels[:, None]).any(axis=1)))


def winner_distribution(assignments, labels, class_count: int) -> np.ndarray:
    """Per-class percentage of examples won by each member (k=1 assignments).

    Classes without any example get a row of NaN.
    """
    a = np.asarray(assignments)
    labels = np.asarray(labels, dtype=np.int64)
    if a.ndim != 2 or a.shape[0] != labels.shape[0]:
        raise ShapeError("assignments must be B x M and match the labels")
    if not np.all(a.sum(axis=1) == 1):
        raise ConfigError("winner_distribution needs k=1 assignments (one winner per row)")
    out = np.full((class_count, a.shape[1]), np.nan)
    for c in range(class_count):
        rows = a[labels == c]
        if len(rows):
            out[c] = 100.0 * rows.sum(axis=0) / len(rows)
    return out


def specialization_entropy(distribution) -> float:
    """Mean natural-log entropy of the per-class winner rows (absent classes skipped)."""
    dist = np.asarray(distribution, dtype=np.float64)
    rows = dist[~np.isnan(dist).any(axis=1)]
    if len(rows) == 0:
        return math.nan
    p = rows / rows.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return float(terms.sum(axis=1).mean())


@dataclass
class OracleReport:
    oracle_loss: float
    oracle_accuracy: float
    per_member_accuracy: list[float]
    winner_distribution: np.ndarray
    specialization_entropy: float
    split: str = "test"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        dist = [[None if math.isnan(v) else float(v) for v in row] for row in np.asarray(self.winner_distribution)]
        return {
            "oracle_loss": float(self.oracle_loss),
            "oracle_accuracy": float(self.oracle_accuracy),
            "per_member_accuracy": [float(a) for a in self.per_member_accuracy],
            "winner_distribution": dist,
            "specialization_entropy": None if math.isnan(self.specialization_entropy) else float(self.specialization_entropy),
            "split": self.split,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "OracleReport":
        dist = np.array([[math.nan if v is None else v for v in row] for row in d["winner_distribution"]], dtype=np.float64)
        ent = d.get("specialization_entropy")
        return cls(
            oracle_loss=d["oracle_loss"],
            oracle_accuracy=d["oracle_accuracy"],
            per_member_accuracy=list(d["per_member_accuracy"]),
            winner_distribution=dist,
            specialization_entropy=math.nan if ent is None else ent,
            split=d.get("split", "test"),
        )


def build_report(ensemble: Ensemble, inputs, labels, class_count: int | None = None, split: str = "test") -> OracleReport:
    """Every oracle metric from a single forward pass per member."""
    labels = np.asarray(labels, dtype=np.int64)
    class_count = class_count or ensemble.num_classes
    logits = member_logits(ensemble, inputs)
    losses = np.stack([loss_softmax_xent(lg, labels) for lg in logits], axis=1)
    correct = np.stack([lg.argmax(axis=1) == labels for lg in logits], axis=1)
    dist = winner_distribution(assign_winners(losses, 1), labels, class_count)
    return OracleReport(
        oracle_loss=oracle_loss(losses),
        oracle_accuracy=float(correct.any(axis=1).mean()),
        per_member_accuracy=[float(v) for v in correct.mean(axis=0)],
        winner_distribution=dist,
        specialization_entropy=specialization_entropy(dist),
        split=split,
    )
