"""Histogram mutual information, redundancy/relevance scores, top-k
selection and the two evaluation metrics (macro F1, 1-RAE)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_BINS = 20


@dataclass(frozen=True)
class DiscretizedColumn:
    codes: np.ndarray  # int64 in [0, n_bins)
    n_bins: int


def default_bins(n: int) -> int:
    return min(MAX_BINS, int(np.ceil(np.sqrt(n))))


def quantile_discretize(x: np.ndarray, n_bins: int | None = None) -> DiscretizedColumn:
    """Bin a real vector at empirical quantiles; tied edges collapse bins."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot discretize an empty vector")
    if n_bins is None:
        n_bins = default_bins(x.size)
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    if n_bins == 1:
        return DiscretizedColumn(np.zeros(x.size, dtype=np.int64), 1)
    qs = np.arange(1, n_bins) / n_bins
    edges = np.unique(np.quantile(x, qs))
    raw = np.searchsorted(edges, x, side="left")
    _, codes = np.unique(raw, return_inverse=True)
    return DiscretizedColumn(codes.astype(np.int64), int(codes.max()) + 1)


def discretize_target(y: np.ndarray, task: str) -> DiscretizedColumn:
    """Class labels pass through as their own codes; regression targets bin."""
    y = np.asarray(y)
    if task == "classification":
        _, codes = np.unique(y, return_inverse=True)
        return DiscretizedColumn(codes.astype(np.int64), int(codes.max()) + 1)
    return quantile_discretize(y.astype(np.float64))


def _values(obj) -> np.ndarray:
    return obj.values if hasattr(obj, "values") else np.asarray(obj, dtype=np.float64)


def _as_column(obj, n_bins: int | None = None) -> DiscretizedColumn:
    if isinstance(obj, DiscretizedColumn):
        return obj
    return quantile_discretize(_values(obj), n_bins)


def mutual_info(a: DiscretizedColumn, b: DiscretizedColumn) -> float:
    """Plug-in estimate sum p(i,j) ln[p(i,j)/(p(i)p(j))] in nats, clamped at 0."""
    if a.codes.size != b.codes.size:
        raise ValueError("columns must have equal length")
    n = a.codes.size
    joint = np.bincount(a.codes * b.n_bins + b.codes,
                        minlength=a.n_bins * b.n_bins).reshape(a.n_bins, b.n_bins)
    p = joint / n
    pa = p.sum(axis=1)
    pb = p.sum(axis=0)
    nz = p > 0
    outer = np.outer(pa, pb)
    mi = float(np.sum(p[nz] * np.log(p[nz] / outer[nz])))
    return max(mi, 0.0)


def column_entropy(a: DiscretizedColumn) -> float:
    return mutual_info(a, a)


def redundancy_id(subset, n_bins: int | None = None) -> float:
    """Average pairwise MI over all ordered feature pairs, diagonal included."""
    if len(subset) == 0:
        raise ValueError("redundancy of an empty subset is undefined")
    cols = [_as_column(f, n_bins) for f in subset]
    m = len(cols)
    total = 0.0
    for i in range(m):
        total += column_entropy(cols[i])
        for j in range(i + 1, m):
            total += 2.0 * mutual_info(cols[i], cols[j])
    return total / (m * m)


def relevance_iv(subset, y: DiscretizedColumn, n_bins: int | None = None) -> float:
    """Mean MI between each subset feature and the target codes."""
    if len(subset) == 0:
        raise ValueError("relevance of an empty subset is undefined")
    cols = [_as_column(f, n_bins) for f in subset]
    return float(np.mean([mutual_info(c, y) for c in cols]))


def label_mi_scores(pool, y: DiscretizedColumn) -> np.ndarray:
    feats = pool.features if hasattr(pool, "features") else pool
    return np.array([mutual_info(_as_column(f), y) for f in feats])


def top_k_select(pool, y: DiscretizedColumn, k: int, method: str = "mi") -> list[int]:
    """Indices of the min(k, N) features with highest label MI, descending.

    Ties break toward the lower pool index. method="mrmr" greedily penalizes
    candidates by their mean MI with the already-selected set.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = label_mi_scores(pool, y)
    n = len(scores)
    k = min(k, n)
    if method == "mi":
        order = sorted(range(n), key=lambda i: (-scores[i], i))
        return order[:k]
    if method != "mrmr":
        raise ValueError(f"unknown selection method: {method!r}")
    feats = pool.features if hasattr(pool, "features") else pool
    cols = [_as_column(f) for f in feats]
    selected = [int(np.argmax(scores))]
    while len(selected) < k:
        best, best_val = None, -np.inf
        for i in range(n):
            if i in selected:
                continue
            penalty = np.mean([mutual_info(cols[i], cols[j]) for j in selected])
            val = scores[i] - penalty
            if val > best_val + 1e-15 or (abs(val - best_val) <= 1e-15 and i < best):
                best, best_val = i, val
        selected.append(best)
    return selected


def f1_score(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Macro-averaged F1; a class with precision + recall = 0 scores 0."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValueError("prediction length mismatch")
    labels = np.union1d(np.unique(y_true), np.unique(y_pred))
    per_class = []
    for label in labels:
        tp = np.sum((y_pred == label) & (y_true == label))
        fp = np.sum((y_pred == label) & (y_true != label))
        fn = np.sum((y_pred != label) & (y_true == label))
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        if precision + recall == 0.0:
            per_class.append(0.0)
        else:
            per_class.append(2.0 * precision * recall / (precision + recall))
    return float(np.mean(per_class))


def one_minus_rae(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """1 - sum|y - yhat| / sum|y - mean(y)|; negative for bad predictors."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape:
        raise ValueError("prediction length mismatch")
    denom = np.sum(np.abs(y_true - y_true.mean()))
    if denom == 0.0:
        raise ValueError("1-RAE undefined for a constant target")
    return float(1.0 - np.sum(np.abs(y_true - y_pred)) / denom)
