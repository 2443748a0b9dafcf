"""Synthetic generators, IDX/CSV loaders and the batch schedule."""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .rng import stream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int
    split_tag: str = "train"
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise DataError("inputs must be N x D")
        if len(self.labels) != len(self.inputs):
            raise DataError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if len(self.labels) < 1:
            raise DataError("empty dataset")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataError(f"labels must lie in [0, {self.class_count})")
        if not np.all(np.isfinite(self.inputs)):
            raise DataError("non-finite input values")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def take(self, indices, split_tag: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.class_count, split_tag or self.split_tag, dict(self.stats))


def gen_ambiguous(seed: int, n: int, input_dim: int, mode_count: int, mode_priors=None, split: str = "train") -> Dataset:
    """Inputs from one standard Gaussian blob, labels drawn from ``mode_priors``
    independently of the input.

    No classifier can beat ``max(mode_priors)`` accuracy here, while an
    ensemble with one member per mode can be right every time.
    """
    if mode_count < 1 or n < 1 or input_dim < 1:
        raise ConfigError("n, input_dim and mode_count must be positive")
    priors = [1.0 / mode_count] * mode_count if mode_priors is None else [float(p) for p in mode_priors]
    if len(priors) != mode_count or any(p < 0 for p in priors) or abs(sum(priors) - 1.0) > 1e-9:
        raise ConfigError("mode_priors must be mode_count non-negative values summing to 1")
    g = stream(seed, "data", "ambiguous", split)
    x = g.normal_array((n, input_dim))
    cumulative = list(np.cumsum(priors))
    y = np.array([g.categorical(cumulative) for _ in range(n)], dtype=np.int64)
    return Dataset(x, y, mode_count, split)


def cluster_centers(seed: int, input_dim: int, class_count: int, confusable_pairs=(), pair_separation: float = 0.0,
                    center_scale: float = 3.0) -> np.ndarray:
    """Class means shared by every split generated from ``seed``."""
    g = stream(seed, "data", "clustered", "centers")
    centers = center_scale * g.normal_array((class_count, input_dim))
    seen = set()
    for a, b in confusable_pairs:
        if a == b or not (0 <= a < class_count and 0 <= b < class_count) or a in seen or b in seen:
            raise ConfigError(f"invalid confusable pair ({a}, {b})")
        seen.update((a, b))
        mid = 0.5 * (centers[a] + centers[b])
        u = g.normal_array(input_dim)
        u /= np.linalg.norm(u)
        centers[a] = mid + 0.5 * pair_separation * u
        centers[b] = mid - 0.5 * pair_separation * u
    return centers


def gen_clustered_classes(seed: int, n: int, input_dim: int, class_count: int, cluster_spread: float = 1.0,
                          confusable_pairs=(), pair_separation: float = 0.0, center_scale: float = 3.0,
                          split: str = "train") -> Dataset:
    """One isotropic Gaussian per class; each confusable pair is squeezed onto
    the midpoint of its two centres, ``pair_separation`` apart.

    Labels are balanced to within one example per class.
    """
    if class_count < 2:
        raise ConfigError("class_count must be at least 2")
    if n < 1 or input_dim < 1 or cluster_spread < 0:
        raise ConfigError("n and input_dim must be positive, cluster_spread non-negative")
    centers = cluster_centers(seed, input_dim, class_count, [tuple(p) for p in confusable_pairs], pair_separation, center_scale)
    g = stream(seed, "data", "clustered", split)
    y = (np.arange(n) % class_count)[g.permutation(n)]
    x = centers[y] + cluster_spread * g.normal_array((n, input_dim))
    return Dataset(x, y, class_count, split)


def _read_idx(path, expected_magic: int) -> tuple[tuple[int, ...], bytes]:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise DataError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise DataError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(blob) < head:
        raise DataError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", blob[4:head])
    size = int(np.prod(dims, dtype=np.int64))
    payload = blob[head:]
    if len(payload) != size:
        raise DataError(f"{path}: payload has {len(payload)} bytes, dims {dims} need {size}")
    return dims, payload


def load_idx(images_path, labels_path, stats: dict | None = None, class_count: int | None = None,
             split: str = "train") -> Dataset:
    """MNIST-style IDX pair -> flattened inputs scaled to [0, 1], minus the per-feature mean.

    Pass the training set's ``stats`` when loading a test split so both use
    the same mean.
    """
    dims, pixels = _read_idx(images_path, IDX_IMAGES_MAGIC)
    (ldims, raw_labels) = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if dims[0] != ldims[0]:
        raise DataError(f"image count {dims[0]} != label count {ldims[0]}")
    x = np.frombuffer(pixels, dtype=np.uint8).reshape(dims[0], -1).astype(np.float64) / 255.0
    y = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    if stats is None:
        stats = {"feature_mean": x.mean(axis=0).tolist()}
    mean = np.asarray(stats["feature_mean"], dtype=np.float64)
    if mean.shape != (x.shape[1],):
        raise DataError("stored feature_mean does not match image size")
    return Dataset(x - mean, y, class_count or int(y.max()) + 1, split, stats)


def load_csv(path, label_column: str = "label", class_count: int | None = None, split: str = "train") -> Dataset:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    dupes = sorted({h for h in header if header.count(h) > 1})
    if dupes:
        raise DataError(f"{path}: duplicate column names {dupes}")
    if label_column not in header:
        raise DataError(f"{path}: label column {label_column!r} not found")
    li = header.index(label_column)
    feats, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            labels.append(int(row[li]))
        except ValueError:
            raise DataError(f"{path}:{lineno}: label {row[li]!r} is not an integer") from None
        try:
            feats.append([float(v) for j, v in enumerate(row) if j != li])
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric cell") from None
    if not labels:
        raise DataError(f"{path}: no data rows")
    y = np.asarray(labels, dtype=np.int64)
    if y.min() < 0:
        raise DataError(f"{path}: negative label")
    x = np.asarray(feats, dtype=np.float64).reshape(len(labels), len(header) - 1)
    return Dataset(x, y, class_count or int(y.max()) + 1, split)


def write_csv(dataset: Dataset, path, label_column: str = "label") -> None:
    """Write features ``x0..x{D-1}`` and the label; floats are written with repr so they round-trip."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"x{j}" for j in range(dataset.input_dim)] + [label_column])
        for xi, yi in zip(dataset.inputs, dataset.labels):
            w.writerow([repr(float(v)) for v in xi] + [int(yi)])


def write_stats(dataset: Dataset, path, **extra) -> None:
    payload = {
        "n": len(dataset),
        "input_dim": dataset.input_dim,
        "class_count": dataset.class_count,
        "split": dataset.split_tag,
        "class_counts": np.bincount(dataset.labels, minlength=dataset.class_count).tolist(),
        "feature_mean": dataset.inputs.mean(axis=0).tolist(),
        **extra,
    }
    Path(path).write_text(json.dumps(payload, indent=2))


@dataclass
class BatchPlan:
    """Epoch-wise shuffled mini-batches; permutations come from the seed's
    ``shuffle`` stream and are generated on first use."""

    seed: int
    batch_size: int
    substream: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")

    def permutation(self, n: int, epoch: int) -> np.ndarray:
        key = (n, epoch)
        perm = self._cache.get(key)
        if perm is None:
            perm = stream(self.seed, "shuffle", self.substream, n, epoch).permutation(n)
            self._cache.clear()
            self._cache[key] = perm
        return perm

    def batches_per_epoch(self, n: int) -> int:
        return math.ceil(n / self.batch_size)

    def indices(self, n: int, iteration: int) -> np.ndarray:
        """Positions in ``[0, n)`` for the batch at ``iteration``; the last batch of an epoch may be short."""
        bpe = self.batches_per_epoch(n)
        epoch, pos = divmod(iteration, bpe)
        return self.permutation(n, epoch)[pos * self.batch_size:(pos + 1) * self.batch_size]


def next_batch(plan: BatchPlan, dataset: Dataset, global_iteration: int) -> tuple[np.ndarray, np.ndarray]:
    idx = plan.indices(len(dataset), global_iteration)
    return dataset.inputs[idx], dataset.labels[idx]
