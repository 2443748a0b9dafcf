"""Oracle-loss ensembles: stochastic multiple choice learning and baselines."""

__version__ = "0.1.0"

from .engine import NetworkSpec, OptimizerConfig, ParameterSet, mlp  # noqa: E402
from .ensemble import Ensemble, OracleReport  # noqa: E402
from .datasets import Dataset  # noqa: E402
from .trainers import TrainConfig, evaluate, train  # noqa: E402

__all__ = [
    "Dataset",
    "Ensemble",
    "NetworkSpec",
    "OptimizerConfig",
    "OracleReport",
    "ParameterSet",
    "TrainConfig",
    "evaluate",
    "mlp",
    "train",
]
