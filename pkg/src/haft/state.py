"""Agent observations: per-feature descriptors and the critic's two-branch
fixed-length state (49 normalized summary statistics + 49-dim attention
pooling), which stays 98 entries long for any pool size."""

from __future__ import annotations

import numpy as np

from . import nn
from .features import N_OPERATIONS

DESCRIPTOR_DIM = 7
STATS_DIM = DESCRIPTOR_DIM * DESCRIPTOR_DIM  # 49
ATTN_DIM = 49
CRITIC_STATE_DIM = STATS_DIM + ATTN_DIM  # 98
STATS_CLAMP = 5.0


def compress(x: np.ndarray) -> np.ndarray:
    """sign(x) * log1p(|x|), applied to network inputs.

    Pool values are hygiene-clamped to 1e12, so raw descriptors can reach
    magnitudes where policy logits would swamp the -1e9 mask constant; this
    elementwise squash bounds every network input to ~27.6 while preserving
    order and permutation equivariance.
    """
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.log1p(np.abs(x))


def feature_descriptor(values: np.ndarray) -> np.ndarray:
    """[mean, std, min, max, Q1, Q2, Q3] with linearly interpolated quartiles."""
    v = np.asarray(values, dtype=np.float64)
    q1, q2, q3 = np.percentile(v, [25.0, 50.0, 75.0])
    return np.array([v.mean(), v.std(), v.min(), v.max(), q1, q2, q3])


def descriptor_matrix(pool) -> np.ndarray:
    feats = pool.features if hasattr(pool, "features") else pool
    return np.stack([feature_descriptor(f.values) for f in feats])


def summary_matrix(desc: np.ndarray) -> np.ndarray:
    """7x7 raw summary: row j holds the 7 statistics of descriptor column j."""
    return np.stack([feature_descriptor(desc[:, j]) for j in range(DESCRIPTOR_DIM)])


class RunningNormalizer:
    """Per-entry Welford mean/variance for the 49 raw summary entries.

    Normalizing with zero observations is the identity map.
    """

    def __init__(self, dim: int = STATS_DIM):
        self.dim = dim
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        if self.count == 0:
            return np.asarray(x, dtype=np.float64).copy()
        std = np.sqrt(self.m2 / self.count)
        std = np.where(std < 1e-8, 1.0, std)
        return (x - self.mean) / std

    def update(self, x: np.ndarray) -> None:
        self.count += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (x - self.mean)


def stats_vector(pool, norm: RunningNormalizer, update: bool = True) -> np.ndarray:
    """The 49-entry normalized statistics branch for the critic state.

    The 7x7 summary is flattened row-major (outer index = descriptor column,
    inner = statistic), z-scored entry-wise with the running normalizer and
    clamped to [-5, 5]. With update=False the normalizer counters are frozen,
    making the call pure.
    """
    raw = summary_matrix(descriptor_matrix(pool)).reshape(-1)
    z = norm.normalize(raw)
    if update:
        norm.update(raw)
    return np.clip(z, -STATS_CLAMP, STATS_CLAMP)


class AttnBranch:
    """Attention branch of the critic state: embed descriptors, one
    multi-head self-attention block, mean-max pooling, projection to 49."""

    def __init__(self, store: nn.ParamStore, name: str, d_model: int,
                 n_heads: int, rng: np.random.Generator):
        self.embed = nn.Linear(store, f"{name}.embed", DESCRIPTOR_DIM, d_model, rng)
        self.block = nn.EncoderBlock(store, f"{name}.block", d_model, n_heads, rng)
        self.pool = nn.MeanMaxPool()
        self.proj = nn.Linear(store, f"{name}.proj", 2 * d_model, ATTN_DIM, rng)

    def forward(self, desc: np.ndarray) -> np.ndarray:
        tokens = self.block.forward(self.embed.forward(compress(desc)))
        return self.proj.forward(self.pool.forward(tokens))

    def backward(self, dz: np.ndarray) -> None:
        dtokens = self.pool.backward(self.proj.backward(dz))
        self.embed.backward(self.block.backward(dtokens))


def op_onehot(op_id: int) -> np.ndarray:
    if not 0 <= op_id < N_OPERATIONS:
        raise ValueError(f"operation id out of range: {op_id}")
    out = np.zeros(N_OPERATIONS)
    out[op_id] = 1.0
    return out
