"""Minimal dense-network kernels with hand-written backward passes.

Everything runs on float64 numpy arrays. Layers cache their forward
activations, so a layer instance must not be reused twice inside a single
forward pass; each usage site owns its own instance. Parameter tensors live
in a ParamStore which also holds gradient and Adam moment buffers.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

LEAKY_SLOPE = 0.01
MASK_NEG = -1e9


class Param:
    """A named tensor with paired gradient and Adam moment buffers."""

    __slots__ = ("name", "data", "grad", "m", "v")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)


class ParamStore:
    """Ordered collection of Params sharing one Adam timestep."""

    def __init__(self) -> None:
        self.params: dict[str, Param] = {}
        self.step_count = 0

    def create(self, name: str, shape: tuple[int, ...], rng: np.random.Generator,
               fan_in: int | None = None) -> Param:
        # uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)); biases inherit the fan-in
        # of their layer so a (out,)-shaped tensor is not treated as fan_in=out.
        if fan_in is None:
            fan_in = shape[0]
        bound = np.sqrt(1.0 / max(fan_in, 1))
        p = Param(name, rng.uniform(-bound, bound, size=shape))
        return self._register(p)

    def create_const(self, name: str, data: np.ndarray) -> Param:
        return self._register(Param(name, np.array(data, dtype=np.float64)))

    def _register(self, p: Param) -> Param:
        if p.name in self.params:
            raise ValueError(f"duplicate parameter name: {p.name}")
        self.params[p.name] = p
        return p

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad[...] = 0.0

    def adam_step(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8) -> None:
        self.step_count += 1
        t = self.step_count
        for p in self.params.values():
            p.m[...] = beta1 * p.m + (1.0 - beta1) * p.grad
            p.v[...] = beta2 * p.v + (1.0 - beta2) * p.grad * p.grad
            m_hat = p.m / (1.0 - beta1 ** t)
            v_hat = p.v / (1.0 - beta2 ** t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, data in snap.items():
            self.params[k].data[...] = data

    def save(self, prefix: str | Path) -> None:
        """Write <prefix>.bin (little-endian float64 payloads) and <prefix>.json."""
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        manifest = []
        offset = 0
        with open(f"{prefix}.bin", "wb") as fh:
            for p in self.params.values():
                payload = np.ascontiguousarray(p.data, dtype="<f8")
                fh.write(payload.tobytes())
                manifest.append({"name": p.name, "shape": list(p.data.shape),
                                 "dtype": "<f8", "offset": offset})
                offset += payload.nbytes
        with open(f"{prefix}.json", "w") as fh:
            json.dump({"tensors": manifest}, fh, indent=1)

    def load(self, prefix: str | Path) -> None:
        prefix = Path(prefix)
        with open(f"{prefix}.json") as fh:
            manifest = json.load(fh)["tensors"]
        raw = Path(f"{prefix}.bin").read_bytes()
        for entry in manifest:
            p = self.params[entry["name"]]
            shape = tuple(entry["shape"])
            if shape != p.data.shape:
                raise ValueError(f"shape mismatch for {entry['name']}: "
                                 f"{shape} vs {p.data.shape}")
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(raw, dtype="<f8", count=n,
                                offset=entry["offset"]).reshape(shape)
            p.data[...] = arr


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax after adding a large negative constant to masked-out logits.

    Works on 1-D vectors or row-batched 2-D arrays. Masked entries come out
    with probability 0 in float64 (the shifted exponent underflows), which
    satisfies the < 1e-8 contract exactly.
    """
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all(np.sum(mask, axis=-1) > 0):
        raise ValueError("masked_softmax: at least one action must be valid")
    return softmax(logits + MASK_NEG * (1.0 - mask), axis=-1)


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p)
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator):
        self.W = store.create(f"{name}.W", (d_in, d_out), rng, fan_in=d_in)
        self.b = store.create(f"{name}.b", (d_out,), rng, fan_in=d_in)

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._squeeze = np.ndim(x) == 1
        self._x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = self._x @ self.W.data + self.b.data
        return y[0] if self._squeeze else y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dy = np.atleast_2d(np.asarray(dy, dtype=np.float64))
        self.W.grad += self._x.T @ dy
        self.b.grad += dy.sum(axis=0)
        dx = dy @ self.W.data.T
        return dx[0] if self._squeeze else dx


class LeakyReLU:
    def __init__(self, slope: float = LEAKY_SLOPE):
        self.slope = slope

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._factor = np.where(x >= 0, 1.0, self.slope)
        return x * self._factor

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy * self._factor


class LayerNorm:
    """Row-wise layer normalization with learnable affine parameters."""

    def __init__(self, store: ParamStore, name: str, dim: int, eps: float = 1e-5):
        self.gamma = store.create_const(f"{name}.gamma", np.ones(dim))
        self.beta = store.create_const(f"{name}.beta", np.zeros(dim))
        self.eps = eps
        self.dim = dim

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._squeeze = np.ndim(x) == 1
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self._inv = 1.0 / np.sqrt(var + self.eps)
        self._xhat = (x - mu) * self._inv
        y = self._xhat * self.gamma.data + self.beta.data
        return y[0] if self._squeeze else y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dy = np.atleast_2d(np.asarray(dy, dtype=np.float64))
        self.gamma.grad += (dy * self._xhat).sum(axis=0)
        self.beta.grad += dy.sum(axis=0)
        dxhat = dy * self.gamma.data
        d = self.dim
        dx = (self._inv / d) * (d * dxhat
                                - dxhat.sum(axis=-1, keepdims=True)
                                - self._xhat * (dxhat * self._xhat).sum(axis=-1, keepdims=True))
        return dx[0] if self._squeeze else dx


class MLP:
    """Stack of Linear layers with LeakyReLU between them (last layer linear).

    With zero_head the final layer starts at exactly zero, so the stack's
    initial output is 0 (uniform policy logits, zero value estimates).
    """

    def __init__(self, store: ParamStore, name: str, dims: list[int],
                 rng: np.random.Generator, zero_head: bool = False):
        self.layers: list[Linear] = []
        self.acts: list[LeakyReLU] = []
        for i in range(len(dims) - 1):
            self.layers.append(Linear(store, f"{name}.l{i}", dims[i], dims[i + 1], rng))
            if i < len(dims) - 2:
                self.acts.append(LeakyReLU())
        if zero_head:
            self.layers[-1].W.data[...] = 0.0
            self.layers[-1].b.data[...] = 0.0

    def forward(self, x: np.ndarray) -> np.ndarray:
        for i, layer in enumerate(self.layers):
            x = layer.forward(x)
            if i < len(self.acts):
                x = self.acts[i].forward(x)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for i in range(len(self.layers) - 1, -1, -1):
            if i < len(self.acts):
                dy = self.acts[i].backward(dy)
            dy = self.layers[i].backward(dy)
        return dy


class EncoderBlock:
    """One transformer encoder block: multi-head self-attention + FFN.

    Post-norm layout: out = LN2(h + FFN(h)) with h = LN1(x + MHA(x)).
    No positional terms anywhere, so the block is permutation-equivariant
    over input rows. Per-head attention weights of the latest forward pass
    are kept in ``last_attn`` (shape (heads, N, N)) for inspection.
    """

    def __init__(self, store: ParamStore, name: str, d_model: int, n_heads: int,
                 rng: np.random.Generator, ffn_mult: int = 2):
        if d_model % n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        self.d = d_model
        self.h = n_heads
        self.dh = d_model // n_heads
        self.q = Linear(store, f"{name}.q", d_model, d_model, rng)
        self.k = Linear(store, f"{name}.k", d_model, d_model, rng)
        self.v = Linear(store, f"{name}.v", d_model, d_model, rng)
        self.o = Linear(store, f"{name}.o", d_model, d_model, rng)
        self.ln1 = LayerNorm(store, f"{name}.ln1", d_model)
        self.ff1 = Linear(store, f"{name}.ff1", d_model, ffn_mult * d_model, rng)
        self.ff_act = LeakyReLU()
        self.ff2 = Linear(store, f"{name}.ff2", ffn_mult * d_model, d_model, rng)
        self.ln2 = LayerNorm(store, f"{name}.ln2", d_model)
        self.last_attn: np.ndarray | None = None

    def _split(self, x: np.ndarray) -> np.ndarray:
        n = x.shape[0]
        return x.reshape(n, self.h, self.dh).transpose(1, 0, 2)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        return x.transpose(1, 0, 2).reshape(-1, self.d)

    def forward(self, x: np.ndarray) -> np.ndarray:
        qh = self._split(self.q.forward(x))
        kh = self._split(self.k.forward(x))
        vh = self._split(self.v.forward(x))
        scale = 1.0 / np.sqrt(self.dh)
        scores = qh @ kh.transpose(0, 2, 1) * scale
        attn = softmax(scores, axis=-1)
        ctx = attn @ vh
        self._cache = (qh, kh, vh, attn, scale)
        self.last_attn = attn
        attn_out = self.o.forward(self._merge(ctx))
        h = self.ln1.forward(x + attn_out)
        ffn = self.ff2.forward(self.ff_act.forward(self.ff1.forward(h)))
        return self.ln2.forward(h + ffn)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        qh, kh, vh, attn, scale = self._cache
        dres2 = self.ln2.backward(dout)
        dh = dres2 + self.ff1.backward(self.ff_act.backward(self.ff2.backward(dres2)))
        dres1 = self.ln1.backward(dh)
        dctx = self._split(self.o.backward(dres1))
        dattn = dctx @ vh.transpose(0, 2, 1)
        dvh = attn.transpose(0, 2, 1) @ dctx
        # softmax rows: dS = A * (dA - sum(dA*A))
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dqh = dscores @ kh * scale
        dkh = dscores.transpose(0, 2, 1) @ qh * scale
        dx = dres1.copy()
        dx += self.q.backward(self._merge(dqh))
        dx += self.k.backward(self._merge(dkh))
        dx += self.v.backward(self._merge(dvh))
        return dx


class MeanMaxPool:
    """Concatenate element-wise mean and max over the row dimension."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._n, self._d = x.shape
        self._argmax = x.argmax(axis=0)
        return np.concatenate([x.mean(axis=0), x.max(axis=0)])

    def backward(self, dz: np.ndarray) -> np.ndarray:
        dmean, dmax = dz[:self._d], dz[self._d:]
        dx = np.tile(dmean / self._n, (self._n, 1))
        dx[self._argmax, np.arange(self._d)] += dmax
        return dx


def sample_index(dist: np.ndarray, rng: np.random.Generator) -> tuple[int, float]:
    """Inverse-CDF draw from a probability vector.

    Returns (index, log_prob) with log_prob exactly ln(dist[index]).
    """
    u = rng.random()
    cdf = np.cumsum(dist)
    idx = int(np.searchsorted(cdf, u, side="right"))
    idx = min(idx, len(dist) - 1)
    if dist[idx] <= 0.0:
        nz = np.flatnonzero(dist > 0)
        below = nz[nz <= idx]
        idx = int(below[-1]) if below.size else int(nz[0])
    return idx, float(np.log(dist[idx]))


def greedy_index(dist: np.ndarray) -> int:
    return int(np.argmax(dist))


def sample_batch(dists: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vectorized inverse-CDF sampling over rows of a (B, m) matrix."""
    u = rng.random(dists.shape[0])
    cdf = np.cumsum(dists, axis=1)
    idx = (cdf < u[:, None]).sum(axis=1)
    idx = np.minimum(idx, dists.shape[1] - 1)
    rows = np.arange(len(idx))
    bad = dists[rows, idx] <= 0.0  # cdf roundoff landed on a zero entry
    for row in np.flatnonzero(bad):
        nz = np.flatnonzero(dists[row] > 0)
        below = nz[nz <= idx[row]]
        idx[row] = below[-1] if below.size else nz[0]
    return idx
