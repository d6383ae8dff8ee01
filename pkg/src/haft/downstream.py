"""Downstream evaluation: fit a model on the selected top-k columns under
deterministic cross-validation and return the score that drives the shared
reward."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.ensemble import RandomForestClassifier, RandomForestRegressor

from . import measures
from .data import CLASSIFICATION, REGRESSION

RF_TREES = 50
RF_DEPTH = 8

METRIC_MACRO_F1 = "macro_f1"
METRIC_ONE_MINUS_RAE = "one_minus_rae"


@dataclass(frozen=True)
class EvalProtocol:
    model: str  # "random_forest" | "ridge" | "knn"
    folds: int = 5
    seed: int = 0
    metric: str = METRIC_MACRO_F1
    knn_neighbors: int = 5
    ridge_alpha: float = 1.0

    def __post_init__(self) -> None:
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.metric not in (METRIC_MACRO_F1, METRIC_ONE_MINUS_RAE):
            raise ValueError(f"unknown metric: {self.metric!r}")

    @property
    def task(self) -> str:
        return CLASSIFICATION if self.metric == METRIC_MACRO_F1 else REGRESSION


@dataclass
class EvalResult:
    score: float
    per_fold: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    skipped_folds: int = 0


def metric_for_task(task: str) -> str:
    return METRIC_MACRO_F1 if task == CLASSIFICATION else METRIC_ONE_MINUS_RAE


def _score(metric: str, y_true: np.ndarray, y_pred: np.ndarray) -> float:
    if metric == METRIC_MACRO_F1:
        return measures.f1_score(y_true, y_pred)
    return measures.one_minus_rae(y_true, y_pred)


# ---------------------------------------------------------------------------
# downstream models

def fit_random_forest(X: np.ndarray, y: np.ndarray, task: str, seed: int):
    """50 depth-8 CART trees with bootstrap rows and sqrt-feature subsampling."""
    if task == CLASSIFICATION:
        model = RandomForestClassifier(n_estimators=RF_TREES, max_depth=RF_DEPTH,
                                       max_features="sqrt", bootstrap=True,
                                       random_state=seed, n_jobs=1)
    else:
        model = RandomForestRegressor(n_estimators=RF_TREES, max_depth=RF_DEPTH,
                                      max_features="sqrt", bootstrap=True,
                                      random_state=seed, n_jobs=1)
    model.fit(X, y)
    return model


class _Standardizer:
    def __init__(self, X: np.ndarray):
        self.mean = X.mean(axis=0)
        std = X.std(axis=0)
        self.std = np.where(std < 1e-12, 1.0, std)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.std


class RidgeModel:
    """Closed-form ridge regression on standardized columns."""

    def __init__(self, X: np.ndarray, y: np.ndarray, alpha: float):
        if alpha <= 0:
            raise ValueError("ridge alpha must be positive")
        self.scale = _Standardizer(X)
        Z = self.scale(X)
        self.y_mean = float(np.mean(y))
        k = Z.shape[1]
        self.w = np.linalg.solve(Z.T @ Z + alpha * np.eye(k), Z.T @ (y - self.y_mean))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.scale(X) @ self.w + self.y_mean


class KNNModel:
    """Euclidean kNN on standardized columns.

    Distance ties break toward the lower training-row index (stable sort);
    classification votes break toward the smaller label.
    """

    def __init__(self, X: np.ndarray, y: np.ndarray, k_neighbors: int, task: str):
        if k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if k_neighbors > X.shape[0]:
            raise ValueError("k_neighbors exceeds the number of training rows")
        self.scale = _Standardizer(X)
        self.Z = self.scale(X)
        self.y = np.asarray(y)
        self.k = k_neighbors
        self.task = task

    def predict(self, X: np.ndarray) -> np.ndarray:
        Q = self.scale(X)
        d2 = ((Q[:, None, :] - self.Z[None, :, :]) ** 2).sum(axis=2)
        order = np.argsort(d2, axis=1, kind="stable")[:, :self.k]
        neigh = self.y[order]
        if self.task == CLASSIFICATION:
            out = np.empty(len(X), dtype=self.y.dtype)
            for i in range(len(X)):
                counts = np.bincount(neigh[i].astype(np.int64))
                out[i] = int(np.argmax(counts))
            return out
        return neigh.mean(axis=1)


def fit_ridge(X: np.ndarray, y: np.ndarray, alpha: float) -> RidgeModel:
    return RidgeModel(X, y, alpha)


def fit_knn(X: np.ndarray, y: np.ndarray, k_neighbors: int, task: str) -> KNNModel:
    return KNNModel(X, y, k_neighbors, task)


def _fit(proto: EvalProtocol, X: np.ndarray, y: np.ndarray, seed: int):
    if proto.model == "random_forest":
        return fit_random_forest(X, y, proto.task, seed)
    if proto.model == "ridge":
        if proto.task == CLASSIFICATION:
            raise ValueError("ridge regression cannot serve a classification task")
        return fit_ridge(X, y, proto.ridge_alpha)
    if proto.model == "knn":
        return fit_knn(X, y, min(proto.knn_neighbors, X.shape[0]), proto.task)
    raise ValueError(f"unknown downstream model: {proto.model!r}")


def fold_indices(n: int, folds: int, seed: int, y=None) -> list[np.ndarray]:
    """Deterministic shuffled fold assignment; stratified when y is given."""
    rng = np.random.default_rng(seed)
    if y is None:
        return [np.sort(part) for part in np.array_split(rng.permutation(n), folds)]
    buckets: list[list[int]] = [[] for _ in range(folds)]
    slot = 0
    for label in np.unique(y):
        members = np.flatnonzero(y == label)
        members = members[rng.permutation(members.size)]
        for idx in members:
            buckets[slot % folds].append(int(idx))
            slot += 1
    return [np.sort(np.array(b, dtype=np.int64)) for b in buckets]


def evaluate(pool, y: np.ndarray, k: int, proto: EvalProtocol,
             select_method: str = "mi") -> EvalResult:
    """Cross-validated score of the pool's top-k label-MI columns.

    Pure in (pool contents, y, k, proto): fold assignment and model seeds
    derive only from proto.seed, so identical inputs give identical scores.
    """
    t0 = time.perf_counter()
    y = np.asarray(y)
    y_codes = measures.discretize_target(y, proto.task)
    chosen = measures.top_k_select(pool, y_codes, k, method=select_method)
    X = pool.matrix()[:, chosen]
    strat = y if proto.task == CLASSIFICATION else None
    folds = fold_indices(X.shape[0], proto.folds, proto.seed, strat)

    per_fold: list[float] = []
    skipped = 0
    for i, val_idx in enumerate(folds):
        train_idx = np.setdiff1d(np.arange(X.shape[0]), val_idx)
        if val_idx.size == 0 or train_idx.size == 0:
            skipped += 1
            continue
        y_train = y[train_idx]
        if proto.task == CLASSIFICATION and np.unique(y_train).size < 2:
            skipped += 1
            continue
        model = _fit(proto, X[train_idx], y_train, seed=proto.seed + i)
        pred = model.predict(X[val_idx])
        per_fold.append(_score(proto.metric, y[val_idx], pred))
    if not per_fold:
        raise ValueError("every fold was degenerate; cannot score the pool")
    return EvalResult(score=float(np.mean(per_fold)), per_fold=per_fold,
                      wall_time=time.perf_counter() - t0, skipped_folds=skipped)


def reward_from_score(score: float, mode: str = "absolute",
                      prev_score: float | None = None) -> float:
    """The scalar credited equally to all three agents at a step."""
    if mode == "absolute":
        return float(score)
    if mode == "delta":
        if prev_score is None:
            raise ValueError("delta reward mode needs the previous score")
        return float(score - prev_score)
    raise ValueError(f"unknown reward mode: {mode!r}")
