"""The evolving feature pool: 16 crossing operations, validity masks,
traceable provenance expressions and dedup policy."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.stats import rankdata

CLAMP = 1e12
EPS_DENOM = 1e-12
TAN_POLE_TOL = 1e-6
EXP_MAX_INPUT = 50.0
POWER_MAX_INPUT = 1e10
CORR_DUP_LIMIT = 0.999
CONST_TOL = 1e-12


@dataclass(frozen=True)
class Operation:
    name: str
    arity: int
    symbol: str | None = None


OPERATIONS: tuple[Operation, ...] = (
    Operation("sqrt", 1),
    Operation("square", 1),
    Operation("cos", 1),
    Operation("sin", 1),
    Operation("tan", 1),
    Operation("exp", 1),
    Operation("cube", 1),
    Operation("log", 1),
    Operation("reciprocal", 1),
    Operation("quantile_transform", 1),
    Operation("minmax_scale", 1),
    Operation("sigmoid", 1),
    Operation("add", 2, "+"),
    Operation("sub", 2, "-"),
    Operation("mul", 2, "*"),
    Operation("div", 2, "/"),
)
N_OPERATIONS = len(OPERATIONS)
OP_INDEX = {op.name: i for i, op in enumerate(OPERATIONS)}
UNARY_IDS = tuple(i for i, op in enumerate(OPERATIONS) if op.arity == 1)
BINARY_IDS = tuple(i for i, op in enumerate(OPERATIONS) if op.arity == 2)
COMMUTATIVE = frozenset({"add", "mul"})


def is_binary(op_id: int) -> bool:
    return OPERATIONS[op_id].arity == 2


def hygiene(values: np.ndarray) -> tuple[np.ndarray, dict]:
    """Replace NaN with 0 and +/-Inf with +/-1e12, then clamp to [-1e12, 1e12]."""
    values = np.asarray(values, dtype=np.float64)
    nan_mask = np.isnan(values)
    inf_mask = np.isinf(values)
    out = values.copy()
    out[nan_mask] = 0.0
    out[inf_mask] = np.sign(values[inf_mask]) * CLAMP
    clamp_mask = (np.abs(out) > CLAMP) & ~inf_mask
    out = np.clip(out, -CLAMP, CLAMP)
    report = {"nan": int(nan_mask.sum()), "inf": int(inf_mask.sum()),
              "clamped": int(clamp_mask.sum())}
    return out, report


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _quantile_transform(x: np.ndarray) -> np.ndarray:
    # empirical CDF rank mapped to [0, 1]; ties get their average rank
    n = len(x)
    if n == 1:
        return np.zeros(1)
    return (rankdata(x, method="average") - 1.0) / (n - 1.0)


def _minmax_scale(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi - lo < EPS_DENOM:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


_UNARY_IMPL = {
    "sqrt": np.sqrt,
    "square": np.square,
    "cos": np.cos,
    "sin": np.sin,
    "tan": np.tan,
    "exp": np.exp,
    "cube": lambda x: x ** 3,
    "log": np.log,
    "reciprocal": lambda x: 1.0 / x,
    "quantile_transform": _quantile_transform,
    "minmax_scale": _minmax_scale,
    "sigmoid": _sigmoid,
}

_BINARY_IMPL = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
}


def _guarded_div(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, int]:
    guard = np.abs(b) < EPS_DENOM
    out = np.zeros_like(a)
    np.divide(a, b, out=out, where=~guard)
    return out, int(guard.sum())


# ---------------------------------------------------------------------------
# provenance expression trees

def leaf(index: int, name: str) -> dict:
    return {"var": name, "index": int(index)}


def op_node(op_name: str, args: list[dict]) -> dict:
    return {"op": op_name, "args": args}


def canonical_key(tree: dict) -> str:
    if "var" in tree:
        return f"x{tree['index']}"
    keys = [canonical_key(a) for a in tree["args"]]
    if tree["op"] in COMMUTATIVE:
        keys = sorted(keys)
    return f"{tree['op']}({','.join(keys)})"


def render_name(tree: dict) -> str:
    if "var" in tree:
        return tree["var"]
    op = OPERATIONS[OP_INDEX[tree["op"]]]
    if op.arity == 1:
        return f"{op.name}({render_name(tree['args'][0])})"
    a, b = tree["args"]
    return f"[{render_name(a)}]{op.symbol}[{render_name(b)}]"


_SYMBOL_TO_OP = {op.symbol: op.name for op in OPERATIONS if op.symbol}


def parse_name(name: str, original_names: list[str] | tuple[str, ...]) -> dict:
    """Parse a traceable name back into an expression tree.

    Original column names are matched first, then the binary
    "[left]sym[right]" form, then unary "op(inner)" prefixes.
    """
    if name in original_names:
        return leaf(list(original_names).index(name), name)
    if name.startswith("[") and name.endswith("]"):
        depth = 0
        for i, ch in enumerate(name):
            if ch == "[":
                depth += 1
            elif ch == "]":
                depth -= 1
                if depth == 0:
                    if i + 1 >= len(name) or name[i + 1] not in _SYMBOL_TO_OP:
                        break
                    sym = name[i + 1]
                    left = name[1:i]
                    right = name[i + 3:-1]
                    if not (name[i + 2] == "[" and name.endswith("]")):
                        break
                    return op_node(_SYMBOL_TO_OP[sym],
                                   [parse_name(left, original_names),
                                    parse_name(right, original_names)])
    for op_name in _UNARY_IMPL:
        prefix = op_name + "("
        if name.startswith(prefix) and name.endswith(")"):
            return op_node(op_name, [parse_name(name[len(prefix):-1], original_names)])
    raise ValueError(f"cannot parse feature name: {name!r}")


def evaluate_tree(tree: dict, base: np.ndarray) -> np.ndarray:
    """Materialize an expression tree on a (rows, n_original) matrix.

    Hygiene runs after every node, matching how the pool built the feature
    incrementally on the training rows.
    """
    if "var" in tree:
        return np.asarray(base[:, tree["index"]], dtype=np.float64)
    args = [evaluate_tree(a, base) for a in tree["args"]]
    name = tree["op"]
    with np.errstate(all="ignore"):
        if name == "div":
            raw, _ = _guarded_div(args[0], args[1])
        elif name in _BINARY_IMPL:
            raw = _BINARY_IMPL[name](args[0], args[1])
        else:
            raw = _UNARY_IMPL[name](args[0])
    clean, _ = hygiene(raw)
    return clean


# ---------------------------------------------------------------------------

@dataclass
class Feature:
    """A pool column: values on the training rows plus its provenance tree."""

    values: np.ndarray
    name: str
    provenance: dict
    hygiene_report: dict = field(default_factory=dict, compare=False)

    @property
    def key(self) -> str:
        return canonical_key(self.provenance)


def _is_constant(values: np.ndarray) -> bool:
    return float(np.ptp(values)) < CONST_TOL


def valid_mask(f: Feature | np.ndarray) -> np.ndarray:
    """Per-operation validity bits for one feature (length 16, {0, 1})."""
    v = f.values if isinstance(f, Feature) else np.asarray(f, dtype=np.float64)
    bits = np.ones(N_OPERATIONS)
    if v.min() < 0:
        bits[OP_INDEX["sqrt"]] = 0.0
    if v.min() <= 0:
        bits[OP_INDEX["log"]] = 0.0
    if np.any(np.abs(v) < EPS_DENOM):
        bits[OP_INDEX["reciprocal"]] = 0.0
    w = (v - np.pi / 2.0) / np.pi
    if np.min(np.abs(w - np.round(w))) * np.pi < TAN_POLE_TOL:
        bits[OP_INDEX["tan"]] = 0.0
    if v.max() > EXP_MAX_INPUT:
        bits[OP_INDEX["exp"]] = 0.0
    if np.abs(v).max() > POWER_MAX_INPUT:
        bits[OP_INDEX["square"]] = 0.0
        bits[OP_INDEX["cube"]] = 0.0
    if _is_constant(v):
        bits[OP_INDEX["quantile_transform"]] = 0.0
    return bits


def apply_unary(op_id: int, f: Feature) -> Feature:
    op = OPERATIONS[op_id]
    if op.arity != 1:
        raise ValueError(f"{op.name} is not unary")
    if valid_mask(f)[op_id] == 0.0:
        raise RuntimeError(f"mask violation: {op.name} applied to {f.name!r}")
    with np.errstate(all="ignore"):
        raw = _UNARY_IMPL[op.name](f.values)
    clean, report = hygiene(raw)
    tree = op_node(op.name, [f.provenance])
    return Feature(values=clean, name=render_name(tree), provenance=tree,
                   hygiene_report=report)


def apply_binary(op_id: int, f1: Feature, f2: Feature) -> Feature:
    op = OPERATIONS[op_id]
    if op.arity != 2:
        raise ValueError(f"{op.name} is not binary")
    with np.errstate(all="ignore"):
        if op.name == "div":
            raw, guarded = _guarded_div(f1.values, f2.values)
        else:
            raw = _BINARY_IMPL[op.name](f1.values, f2.values)
            guarded = 0
    clean, report = hygiene(raw)
    report["div_guard"] = guarded
    tree = op_node(op.name, [f1.provenance, f2.provenance])
    return Feature(values=clean, name=render_name(tree), provenance=tree,
                   hygiene_report=report)


class FeaturePool:
    """Ordered feature set: originals first, generated features appended.

    ``add`` rejects duplicates (by canonical provenance key), constants and
    features that are nearly collinear (|corr| > 0.999) with an existing
    column. Beyond ``max_size`` the lowest label-MI generated feature is
    evicted to make room; originals are never evicted.
    """

    def __init__(self, features: list[Feature], n_original: int,
                 max_size: int = 512, target_codes=None):
        self.features = list(features)
        self.n_original = n_original
        self.max_size = max_size
        self.target_codes = target_codes
        self._keys = {f.key for f in self.features}
        if len(self._keys) != len(self.features):
            raise ValueError("pool initialized with duplicate provenance keys")

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, names=None, max_size: int = 512,
                    target_codes=None) -> "FeaturePool":
        matrix = np.asarray(matrix, dtype=np.float64)
        if names is None:
            names = [f"f{i}" for i in range(matrix.shape[1])]
        feats = [Feature(values=matrix[:, i].copy(), name=str(names[i]),
                         provenance=leaf(i, str(names[i])))
                 for i in range(matrix.shape[1])]
        return cls(feats, n_original=matrix.shape[1], max_size=max_size,
                   target_codes=target_codes)

    @property
    def size(self) -> int:
        return len(self.features)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    def matrix(self) -> np.ndarray:
        return np.column_stack([f.values for f in self.features])

    def copy(self) -> "FeaturePool":
        return FeaturePool(list(self.features), self.n_original,
                           self.max_size, self.target_codes)

    def add(self, f: Feature) -> bool:
        if f.key in self._keys:
            return False
        if _is_constant(f.values):
            return False
        if self._correlated(f.values):
            return False
        if self.size >= self.max_size and not self._evict_one():
            return False
        self.features.append(f)
        self._keys.add(f.key)
        return True

    def _correlated(self, values: np.ndarray) -> bool:
        v = values - values.mean()
        v_norm = np.linalg.norm(v)
        if v_norm < EPS_DENOM:
            return False
        x = self.matrix()
        x = x - x.mean(axis=0)
        norms = np.linalg.norm(x, axis=0)
        ok = norms > EPS_DENOM
        if not ok.any():
            return False
        corr = np.abs(x[:, ok].T @ v) / (norms[ok] * v_norm)
        return bool(np.any(corr > CORR_DUP_LIMIT))

    def _evict_one(self) -> bool:
        if self.size <= self.n_original:
            return False
        from . import measures  # local import avoids a module cycle

        generated = range(self.n_original, self.size)
        if self.target_codes is not None:
            scores = [measures.mutual_info(
                measures.quantile_discretize(self.features[i].values),
                self.target_codes) for i in generated]
            victim = self.n_original + int(np.argmin(scores))
        else:
            victim = self.n_original
        gone = self.features.pop(victim)
        self._keys.discard(gone.key)
        return True


def init_pool(ds, max_size: int = 512) -> FeaturePool:
    """Fresh pool holding exactly the dataset's original columns."""
    from . import measures

    pool = FeaturePool.from_matrix(ds.features, ds.feature_names, max_size=max_size)
    pool.target_codes = measures.discretize_target(ds.target, ds.task)
    for i, f in enumerate(pool.features):
        f.provenance = leaf(i, ds.feature_names[i])
    return pool


def pool_to_csv(pool: FeaturePool, path: str | Path) -> None:
    frame = pd.DataFrame({f.name: f.values for f in pool.features})
    frame.to_csv(path, index=False)


def provenance_to_json(pool: FeaturePool, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump({f.name: f.provenance for f in pool.features}, fh, indent=1)
