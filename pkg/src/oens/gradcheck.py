"""Randomised backward-vs-central-difference checks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import backward, finite_difference_grad, forward, init_params, max_relative_error, mlp
from .rng import stream


@dataclass
class GradcheckResult:
    trials: int
    max_relative_error: float
    worst_trial: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error <= self.tolerance

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "max_relative_error": self.max_relative_error,
            "worst_trial": self.worst_trial,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def random_case(seed: int, trial: int, max_layers: int = 3, max_units: int = 32):
    """A random network (1..max_layers affine layers, widths <= max_units), batch and example weights."""
    g = stream(seed, "gradcheck", trial)
    n_affine = 1 + g.below(max_layers)
    input_dim = 2 + g.below(9)
    classes = 2 + g.below(9)
    hidden = [1 + g.below(max_units) for _ in range(n_affine - 1)]
    spec = mlp(input_dim, hidden, classes)
    params = init_params(spec, seed * 1_000_003 + trial)
    for j, _ in spec.affine_layers():
        b = params.tensors[f"b{j}"]
        b += 0.1 * g.normal_array(b.shape)
    batch = 1 + g.below(6)
    x = g.normal_array((batch, input_dim))
    y = np.array([g.below(classes) for _ in range(batch)])
    kind = g.below(3)
    if kind == 0:  # single winner
        mask = np.zeros(batch)
        mask[g.below(batch)] = 1.0
    elif kind == 1:  # random 0/1 mask with at least one winner
        mask = np.array([float(g.below(2)) for _ in range(batch)])
        mask[g.below(batch)] = 1.0
    else:  # positive real weights
        mask = g.uniform_array(batch, 0.01, 1.0)
    return spec, params, x, y, mask


def run_gradcheck(trials: int = 100, seed: int = 0, tolerance: float = 1e-4, epsilon: float = 1e-5) -> GradcheckResult:
    worst, worst_trial = 0.0, -1
    for t in range(trials):
        spec, params, x, y, mask = random_case(seed, t)
        _, trace = forward(spec, params, x)
        analytic = backward(spec, params, trace, y, mask)
        numeric = finite_difference_grad(spec, params, x, y, epsilon, example_mask=mask)
        err = max_relative_error(analytic, numeric)
        if err > worst:
            worst, worst_trial = err, t
    return GradcheckResult(trials, worst, worst_trial, tolerance)
