"""Small dense-network engine with hand-written reverse mode.

Tensors are float64 numpy arrays.  A network is a chain of ``affine`` and
``relu`` layers ending in a ``softmax_output`` marker; ``forward`` returns the
pre-softmax logits and a trace that ``backward`` consumes.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import ConfigError, NumericalError, ShapeError, StaleTraceError
from .rng import stream

AFFINE = "affine"
RELU = "relu"
SOFTMAX_OUTPUT = "softmax_output"


@dataclass(frozen=True)
class Layer:
    kind: str
    in_dim: int = 0
    out_dim: int = 0

    def to_dict(self) -> dict:
        if self.kind == AFFINE:
            return {"kind": AFFINE, "in_dim": self.in_dim, "out_dim": self.out_dim}
        if self.kind == SOFTMAX_OUTPUT:
            return {"kind": SOFTMAX_OUTPUT, "num_classes": self.out_dim}
        return {"kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "Layer":
        kind = d["kind"]
        if kind == AFFINE:
            return affine(int(d["in_dim"]), int(d["out_dim"]))
        if kind == RELU:
            return relu()
        if kind == SOFTMAX_OUTPUT:
            return softmax_output(int(d["num_classes"]))
        raise ConfigError(f"unknown layer kind {kind!r}")


def affine(in_dim: int, out_dim: int) -> Layer:
    return Layer(AFFINE, in_dim, out_dim)


def relu() -> Layer:
    return Layer(RELU)


def softmax_output(num_classes: int) -> Layer:
    return Layer(SOFTMAX_OUTPUT, num_classes, num_classes)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    def validate(self) -> None:
        layers = self.layers
        if not layers or layers[-1].kind != SOFTMAX_OUTPUT:
            raise ConfigError("network must end with exactly one softmax_output layer")
        if sum(l.kind == SOFTMAX_OUTPUT for l in layers) != 1:
            raise ConfigError("network must end with exactly one softmax_output layer")
        if not any(l.kind == AFFINE for l in layers):
            raise ConfigError("network needs at least one affine layer")
        dim = None
        for j, layer in enumerate(layers):
            if layer.kind not in (AFFINE, RELU, SOFTMAX_OUTPUT):
                raise ConfigError(f"unknown layer kind {layer.kind!r}")
            if layer.kind == RELU:
                continue
            if layer.in_dim <= 0 or layer.out_dim <= 0:
                raise ConfigError(f"layer {j}: dimensions must be positive")
            if dim is not None and layer.in_dim != dim:
                raise ConfigError(f"layer {j}: in_dim {layer.in_dim} does not chain from {dim}")
            dim = layer.out_dim

    @property
    def input_dim(self) -> int:
        return next(l.in_dim for l in self.layers if l.kind == AFFINE)

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim

    def affine_layers(self) -> Iterator[tuple[int, Layer]]:
        j = 0
        for layer in self.layers:
            if layer.kind == AFFINE:
                yield j, layer
                j += 1

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for j, layer in self.affine_layers():
            shapes[f"W{j}"] = (layer.in_dim, layer.out_dim)
            shapes[f"b{j}"] = (layer.out_dim,)
        return shapes

    def to_list(self) -> list[dict]:
        return [l.to_dict() for l in self.layers]

    @classmethod
    def from_list(cls, items: list[dict]) -> "NetworkSpec":
        return cls(tuple(Layer.from_dict(d) for d in items))

    def digest(self) -> str:
        blob = json.dumps(self.to_list(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def mlp(input_dim: int, hidden: list[int] | tuple[int, ...], num_classes: int) -> NetworkSpec:
    """Affine/ReLU stack with the given hidden widths."""
    layers = []
    dim = input_dim
    for width in hidden:
        layers += [affine(dim, width), relu()]
        dim = width
    layers += [affine(dim, num_classes), softmax_output(num_classes)]
    return NetworkSpec(tuple(layers))


@dataclass
class ParameterSet:
    tensors: dict[str, np.ndarray]
    momentum_buffers: dict[str, np.ndarray] = field(default_factory=dict)
    # bumped by every in-place update; traces remember the value they saw
    version: int = 0

    def __post_init__(self):
        if not self.momentum_buffers:
            self.momentum_buffers = {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            {k: v.copy() for k, v in self.tensors.items()},
            {k: v.copy() for k, v in self.momentum_buffers.items()},
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tensors[k].ravel() for k in sorted(self.tensors)])

    def check_matches(self, spec: NetworkSpec) -> None:
        shapes = spec.param_shapes()
        if set(shapes) != set(self.tensors):
            raise ShapeError(f"parameter names {sorted(self.tensors)} do not match spec {sorted(shapes)}")
        for name, shape in shapes.items():
            if self.tensors[name].shape != shape:
                raise ShapeError(f"{name}: shape {self.tensors[name].shape} != {shape}")


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.01
    momentum: float = 0.0
    weight_decay: float = 0.0
    lr_schedule: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        self.lr_schedule = [(int(i), float(lr)) for i, lr in self.lr_schedule]
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        its = [i for i, _ in self.lr_schedule]
        if any(b <= a for a, b in zip(its, its[1:])):
            raise ConfigError("lr_schedule iterations must be strictly increasing")
        if any(lr <= 0 for _, lr in self.lr_schedule):
            raise ConfigError("lr_schedule rates must be positive")

    def lr_at(self, iteration: int) -> float:
        """Learning rate in effect at ``iteration`` (last schedule entry at or before it)."""
        lr = self.learning_rate
        for start, rate in self.lr_schedule:
            if iteration >= start:
                lr = rate
            else:
                break
        return lr

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "lr_schedule": [list(p) for p in self.lr_schedule],
        }


@dataclass
class ForwardTrace:
    activations: list[np.ndarray]  # input to each layer, then the logits
    batch_size: int
    params_id: int
    params_version: int


def init_params(spec: NetworkSpec, seed: int) -> ParameterSet:
    """Glorot-uniform weights, zero biases, all drawn from the seed's ``init`` stream."""
    g = stream(seed, "init")
    tensors = {}
    for j, layer in spec.affine_layers():
        bound = np.sqrt(6.0 / (layer.in_dim + layer.out_dim))
        tensors[f"W{j}"] = g.uniform_array((layer.in_dim, layer.out_dim), -bound, bound)
        tensors[f"b{j}"] = np.zeros(layer.out_dim)
    return ParameterSet(tensors)


def forward(spec: NetworkSpec, params: ParameterSet, inputs: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"inputs shape {x.shape} does not match input dim {spec.input_dim}")
    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite inputs")
    acts = [x]
    j = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for layer in spec.layers:
            if layer.kind == AFFINE:
                x = x @ params.tensors[f"W{j}"] + params.tensors[f"b{j}"]
                j += 1
            elif layer.kind == RELU:
                x = np.maximum(x, 0.0)
            else:
                continue
            acts.append(x)
    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite logits in forward pass")
    return x, ForwardTrace(acts, x.shape[0], id(params), params.version)


def _check_labels(labels, batch: int, num_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (batch,):
        raise ShapeError(f"labels shape {y.shape} != ({batch},)")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return y


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_softmax_xent(logits: np.ndarray, labels) -> np.ndarray:
    """Per-example cross-entropy ``-log softmax(logits)[label]``."""
    logits = np.asarray(logits, dtype=np.float64)
    y = _check_labels(labels, logits.shape[0], logits.shape[1])
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    loss = log_norm - z[np.arange(len(y)), y]
    # rounding can leave -1e-16 on saturated rows
    return np.maximum(loss, 0.0)


def backward(
    spec: NetworkSpec,
    params: ParameterSet,
    trace: ForwardTrace,
    labels,
    example_mask=None,
    reduction: str = "mean",
) -> dict[str, np.ndarray]:
    """Gradient of the weighted batch loss with respect to every parameter.

    ``example_mask`` holds non-negative per-example weights (0/1 for winner
    masks).  With ``reduction="mean"`` the objective is
    ``sum(w * loss) / sum(w)``; with ``"sum"`` it is ``sum(w * loss)``.
    Examples with weight zero contribute exactly nothing, and an all-zero
    mask yields all-zero gradients.
    """
    if trace.params_id != id(params) or trace.params_version != params.version:
        raise StaleTraceError("forward trace does not belong to the current parameters")
    B = trace.batch_size
    logits = trace.activations[-1]
    y = _check_labels(labels, B, logits.shape[1])
    w = np.ones(B) if example_mask is None else np.asarray(example_mask, dtype=np.float64)
    if w.shape != (B,):
        raise ShapeError(f"mask shape {w.shape} != ({B},)")
    if reduction == "mean":
        total = w.sum()
        scale = w / total if total > 0 else np.zeros(B)
    elif reduction == "sum":
        scale = w
    else:
        raise ConfigError(f"unknown reduction {reduction!r}")

    delta = softmax(logits)
    delta[np.arange(B), y] -= 1.0
    delta *= scale[:, None]

    grads = {}
    acts = trace.activations
    a = len(acts) - 1
    j = sum(1 for l in spec.layers if l.kind == AFFINE)
    for layer in reversed(spec.layers):
        if layer.kind == SOFTMAX_OUTPUT:
            continue
        a -= 1
        inp = acts[a]
        if layer.kind == AFFINE:
            j -= 1
            grads[f"W{j}"] = inp.T @ delta
            grads[f"b{j}"] = delta.sum(axis=0)
            if a > 0:
                delta = delta @ params.tensors[f"W{j}"].T
        else:
            delta = delta * (inp > 0.0)
    return grads


def sgd_step(params: ParameterSet, grads: dict[str, np.ndarray], opt: OptimizerConfig, iteration: int) -> ParameterSet:
    """Momentum SGD with L2 decay, in place: ``v = mu*v + g + wd*theta``, ``theta -= lr*v``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    lr = opt.lr_at(iteration)
    for name, theta in params.tensors.items():
        v = params.momentum_buffers[name]
        g = grads[name]
        if theta.shape != g.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != {theta.shape}")
        with np.errstate(over="ignore", invalid="ignore"):
            v *= opt.momentum
            v += g
            if opt.weight_decay:
                v += opt.weight_decay * theta
            theta -= lr * v
        if not np.all(np.isfinite(theta)):
            raise NumericalError(f"non-finite parameter {name} after update at iteration {iteration}")
    params.version += 1
    return params


def batch_loss(spec: NetworkSpec, params: ParameterSet, inputs, labels, example_mask=None, reduction: str = "mean") -> float:
    """Scalar objective that ``backward`` differentiates."""
    logits, _ = forward(spec, params, inputs)
    loss = loss_softmax_xent(logits, labels)
    w = np.ones(len(loss)) if example_mask is None else np.asarray(example_mask, dtype=np.float64)
    if reduction == "sum":
        return float(w @ loss)
    total = w.sum()
    return float(w @ loss / total) if total > 0 else 0.0


def finite_difference_grad(
    spec: NetworkSpec,
    params: ParameterSet,
    inputs,
    labels,
    epsilon: float = 1e-5,
    example_mask=None,
    reduction: str = "mean",
) -> dict[str, np.ndarray]:
    """Central-difference estimate of the ``backward`` gradient, one scalar at a time."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    probe = params.copy()
    grads = {}
    for name, theta in probe.tensors.items():
        g = np.zeros_like(theta)
        flat = theta.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = batch_loss(spec, probe, inputs, labels, example_mask, reduction)
            flat[i] = orig - epsilon
            down = batch_loss(spec, probe, inputs, labels, example_mask, reduction)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * epsilon)
        grads[name] = g
    return grads


def max_relative_error(a: dict[str, np.ndarray], b: dict[str, np.ndarray], floor: float = 1e-8) -> float:
    """Largest elementwise ``|a-b| / max(|a|, |b|, floor)`` across all tensors."""
    worst = 0.0
    for name in a:
        x, y = a[name], b[name]
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        if x.size:
            worst = max(worst, float(np.max(np.abs(x - y) / denom)))
    return worst
