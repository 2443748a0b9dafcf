import numpy as np
import pytest

from oens.datasets import gen_clustered_classes
from oens.engine import OptimizerConfig

PAIRS = [(0, 1), (2, 3), (4, 5)]


def clustered(seed, n, split="train", **kw):
    params = dict(input_dim=16, class_count=10, cluster_spread=1.0, confusable_pairs=PAIRS, pair_separation=0.5)
    params.update(kw)
    return gen_clustered_classes(seed, n, split=split, **params)


@pytest.fixture
def small_task():
    """Tiny 10-class problem that trains in well under a second."""
    return clustered(3, 400), clustered(3, 200, "probe"), clustered(3, 300, "test")


@pytest.fixture
def opt():
    return OptimizerConfig(learning_rate=0.05, momentum=0.9, weight_decay=1e-4)


def params_equal(a, b):
    return all(np.array_equal(a.tensors[k], b.tensors[k]) and a.tensors[k].tobytes() == b.tensors[k].tobytes()
               for k in a.tensors)


# filled by tests/test_acceptance.py, printed at the end of the session
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
