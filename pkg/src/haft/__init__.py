"""Cooperative three-agent reinforcement learning for automated feature
transformation: attention-based head/tail feature policies, a masked
operation policy and a shared critic over a fixed-length two-branch state."""

from .data import (Dataset, RunConfig, load_config, load_table,
                   make_multiplicative_dataset, split)
from .downstream import EvalProtocol, EvalResult, evaluate, reward_from_score
from .features import Feature, FeaturePool, init_pool
from .harness import RunReport, emit_reports, run_baseline, run_experiment

__version__ = "0.1.0"

__all__ = [
    "Dataset", "RunConfig", "load_config", "load_table", "split",
    "make_multiplicative_dataset", "EvalProtocol", "EvalResult", "evaluate",
    "reward_from_score", "Feature", "FeaturePool", "init_pool",
    "RunReport", "emit_reports", "run_baseline", "run_experiment",
    "__version__",
]
