"""Dataset loading, train/test splitting and run configuration."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

CLASSIFICATION = "classification"
REGRESSION = "regression"
TASKS = (CLASSIFICATION, REGRESSION)

VARIANTS = ("full", "no-shared-critic", "no-decomp", "stats-only")
DOWNSTREAM_MODELS = ("random_forest", "ridge", "knn")
REWARD_MODES = ("absolute", "delta")
INFO_TERM_MODES = ("reward", "loss")
SELECT_METHODS = ("mi", "mrmr")

SEED_ENV_VAR = "HAFT_SEED"


def parse_task(value: str) -> str:
    aliases = {"cls": CLASSIFICATION, "classification": CLASSIFICATION,
               "reg": REGRESSION, "regression": REGRESSION}
    if value not in aliases:
        raise ValueError(f"unknown task kind: {value!r}")
    return aliases[value]


@dataclass(frozen=True)
class Dataset:
    """Immutable table of original features plus target.

    features: (n_samples, n_features) float64, column order matching the
    source header. Classification targets are int64 class labels.
    """

    features: np.ndarray
    feature_names: tuple[str, ...]
    target: np.ndarray
    task: str

    def __post_init__(self) -> None:
        n, k = self.features.shape
        if n < 1:
            raise ValueError("dataset has no rows")
        if k < 2:
            raise ValueError(f"need at least 2 feature columns, got {k}")
        if len(self.feature_names) != k:
            raise ValueError("feature_names length does not match features")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite entries after loading")
        if self.task not in TASKS:
            raise ValueError(f"unknown task: {self.task}")
        if self.task == CLASSIFICATION:
            if self.target.dtype.kind not in "iu":
                raise ValueError("classification target must hold integer labels")
            if np.unique(self.target).size < 2:
                raise ValueError("classification target needs at least 2 classes")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


def load_table(path: str | Path, target_column: str, task: str) -> Dataset:
    """Load a CSV with a header row into a Dataset.

    Missing feature cells are imputed with the column median; a non-numeric
    cell that survives coercion is an error, as is a missing target value.
    """
    task = parse_task(task)
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such data file: {path}")
    df = pd.read_csv(path)
    if target_column not in df.columns:
        raise ValueError(f"target column not found: {target_column!r}")
    feature_cols = [c for c in df.columns if c != target_column]
    if len(feature_cols) < 2:
        raise ValueError("need at least 2 feature columns besides the target")

    columns = []
    for col in feature_cols:
        try:
            vals = pd.to_numeric(df[col], errors="raise").to_numpy(dtype=np.float64)
        except (ValueError, TypeError) as exc:
            raise ValueError(f"non-numeric value in feature column {col!r}") from exc
        missing = ~np.isfinite(vals)
        if missing.all():
            raise ValueError(f"feature column {col!r} has no usable values")
        if missing.any():
            vals = vals.copy()
            vals[missing] = np.median(vals[~missing])
        columns.append(vals)
    features = np.column_stack(columns)

    try:
        target = pd.to_numeric(df[target_column], errors="raise").to_numpy(dtype=np.float64)
    except (ValueError, TypeError) as exc:
        raise ValueError(f"non-numeric value in target column {target_column!r}") from exc
    if not np.all(np.isfinite(target)):
        raise ValueError("target column contains missing or non-finite values")
    if task == CLASSIFICATION:
        rounded = np.round(target)
        if not np.allclose(target, rounded):
            raise ValueError("classification target labels must be integers")
        target = rounded.astype(np.int64)

    if features.shape[0] < 10:
        raise ValueError(f"need at least 10 samples, got {features.shape[0]}")
    return Dataset(features=features, feature_names=tuple(feature_cols),
                   target=target, task=task)


def split(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic shuffled split, stratified by class for classification."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    n = ds.n_samples

    if ds.task == CLASSIFICATION:
        train_idx, test_idx = [], []
        for label in np.unique(ds.target):
            members = np.flatnonzero(ds.target == label)
            if members.size < 2:
                raise ValueError(f"class {label} has fewer samples than splits require")
            members = members[rng.permutation(members.size)]
            k = int(round(train_fraction * members.size))
            k = min(max(k, 1), members.size - 1)
            train_idx.append(members[:k])
            test_idx.append(members[k:])
        train_idx = np.sort(np.concatenate(train_idx))
        test_idx = np.sort(np.concatenate(test_idx))
    else:
        perm = rng.permutation(n)
        k = int(round(train_fraction * n))
        if k == 0 or k == n:
            raise ValueError("split would leave one side empty")
        train_idx = np.sort(perm[:k])
        test_idx = np.sort(perm[k:])

    def take(idx: np.ndarray) -> Dataset:
        return Dataset(features=ds.features[idx], feature_names=ds.feature_names,
                       target=ds.target[idx], task=ds.task)

    return take(train_idx), take(test_idx)


@dataclass
class RunConfig:
    """Resolved run configuration; every field has a documented default."""

    episodes: int = 100
    steps_per_episode: int = 25
    seed: int = 0
    variant: str = "full"
    downstream_model: str = "random_forest"
    top_k: int = 20
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    lr: float = 1e-3
    entropy_coef: float = 0.05
    beta_id: float = 0.01
    beta_iv: float = 0.01
    d_model: int = 32
    n_heads: int = 4
    n_encoder_layers: int = 2
    epochs_per_update: int = 4
    folds: int = 5
    train_fraction: float = 0.8
    reward_mode: str = "absolute"
    info_terms: str = "reward"
    max_pool_size: int = 512
    early_stop_patience: int = 0
    select_method: str = "mi"
    knn_neighbors: int = 5
    ridge_alpha: float = 1.0

    def validate(self) -> "RunConfig":
        checks = [
            (self.episodes >= 1, "episodes must be >= 1"),
            (self.steps_per_episode >= 1, "steps_per_episode must be >= 1"),
            (0.0 <= self.gamma <= 1.0, "gamma must lie in [0, 1]"),
            (0.0 <= self.gae_lambda <= 1.0, "lambda must lie in [0, 1]"),
            (self.clip_eps > 0.0, "clip_eps must be positive"),
            (self.lr > 0.0, "lr must be positive"),
            (self.entropy_coef >= 0.0, "entropy_coef must be non-negative"),
            (self.top_k >= 1, "top_k must be >= 1"),
            (self.d_model >= 1 and self.d_model % self.n_heads == 0,
             "d_model must be divisible by n_heads"),
            (self.n_encoder_layers >= 1, "n_encoder_layers must be >= 1"),
            (self.epochs_per_update >= 1, "epochs_per_update must be >= 1"),
            (self.folds >= 2, "folds must be >= 2"),
            (0.0 < self.train_fraction < 1.0, "train_fraction must lie in (0, 1)"),
            (self.variant in VARIANTS, f"variant must be one of {VARIANTS}"),
            (self.downstream_model in DOWNSTREAM_MODELS,
             f"downstream_model must be one of {DOWNSTREAM_MODELS}"),
            (self.reward_mode in REWARD_MODES, f"reward_mode must be one of {REWARD_MODES}"),
            (self.info_terms in INFO_TERM_MODES,
             f"info_terms must be one of {INFO_TERM_MODES}"),
            (self.select_method in SELECT_METHODS,
             f"select_method must be one of {SELECT_METHODS}"),
            (self.max_pool_size >= 2, "max_pool_size must be >= 2"),
            (self.early_stop_patience >= 0, "early_stop_patience must be >= 0"),
            (self.knn_neighbors >= 1, "knn_neighbors must be >= 1"),
            (self.ridge_alpha > 0.0, "ridge_alpha must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(f"config out of range: {msg}")
        return self


# JSON key <-> dataclass field ("lambda" is reserved in Python).
_KEY_TO_FIELD = {f.name: f.name for f in dataclasses.fields(RunConfig)}
_KEY_TO_FIELD["lambda"] = "gae_lambda"
del _KEY_TO_FIELD["gae_lambda"]
_FIELD_TO_KEY = {v: k for k, v in _KEY_TO_FIELD.items()}


def load_config(path: str | Path | None = None) -> RunConfig:
    """Read a flat JSON config; unspecified keys fall back to defaults.

    The HAFT_SEED environment variable, when set, overrides the file's seed.
    """
    values: dict = {}
    if path is not None:
        with open(path) as fh:
            text = fh.read().strip()
        raw = json.loads(text) if text else {}
        if not isinstance(raw, dict):
            raise ValueError("config file must hold a JSON object")
        for key, val in raw.items():
            if key not in _KEY_TO_FIELD:
                raise ValueError(f"unknown config key: {key!r}")
            values[_KEY_TO_FIELD[key]] = val
    cfg = RunConfig(**values)
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        cfg.seed = int(env_seed)
    return cfg.validate()


def config_to_dict(cfg: RunConfig) -> dict:
    return {_FIELD_TO_KEY[f.name]: getattr(cfg, f.name)
            for f in dataclasses.fields(RunConfig)}


def save_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=1, sort_keys=True)


def make_multiplicative_dataset(n: int = 500, n_features: int = 5,
                                noise_scale: float = 0.05, seed: int = 0) -> Dataset:
    """Synthetic regression table where the target is x1*x2 plus scaled noise."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, n_features))
    y = x[:, 0] * x[:, 1]
    y = y + noise_scale * np.std(y) * rng.standard_normal(n)
    names = tuple(f"x{i + 1}" for i in range(n_features))
    return Dataset(features=x, feature_names=names, target=y, task=REGRESSION)
