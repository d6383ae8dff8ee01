"""The three heterogeneous policies and the shared value network.

Head and tail feature policies score per-feature tokens through a small
transformer encoder, so they accept any pool size and stay permutation
equivariant. The operation policy is a masked two-layer MLP over a fixed
23-dim state. The critic maps the 98-dim two-branch state to a scalar,
training its attention branch jointly with the value loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn, state
from .features import N_OPERATIONS, OP_INDEX, is_binary

OP_STATE_DIM = N_OPERATIONS + state.DESCRIPTOR_DIM  # 16 mask bits + 7 descriptor
TAIL_CONTEXT_DIM = state.DESCRIPTOR_DIM + N_OPERATIONS  # 7 descriptor + 16 one-hot
MLP_HIDDEN = 64
SELF_MASKED_OPS = (OP_INDEX["sub"], OP_INDEX["div"])


class FeaturePolicy:
    """Token scorer over a variable-size pool: embed 7-dim descriptors,
    run encoder blocks, score each token to one logit."""

    def __init__(self, store: nn.ParamStore, name: str, d_model: int,
                 n_heads: int, n_layers: int, rng: np.random.Generator,
                 context_dim: int = 0):
        self.store = store
        self.embed = nn.Linear(store, f"{name}.embed", state.DESCRIPTOR_DIM,
                               d_model, rng)
        self.ctx_embed = None
        if context_dim:
            self.ctx_embed = nn.Linear(store, f"{name}.ctx", context_dim,
                                       d_model, rng)
        self.blocks = [nn.EncoderBlock(store, f"{name}.enc{i}", d_model, n_heads, rng)
                       for i in range(n_layers)]
        self.score = nn.Linear(store, f"{name}.score", d_model, 1, rng)
        # zero-started heads keep the initial policy exactly uniform
        self.score.W.data[...] = 0.0
        self.score.b.data[...] = 0.0

    def forward(self, desc: np.ndarray, context: np.ndarray | None = None) -> np.ndarray:
        tokens = self.embed.forward(state.compress(desc))
        if self.ctx_embed is not None:
            if context is None:
                raise ValueError("this policy requires a context vector")
            tokens = tokens + self.ctx_embed.forward(state.compress(context))
        for block in self.blocks:
            tokens = block.forward(tokens)
        return self.score.forward(tokens).ravel()

    def backward(self, dlogits: np.ndarray) -> None:
        dtok = self.score.backward(dlogits[:, None])
        for block in reversed(self.blocks):
            dtok = block.backward(dtok)
        if self.ctx_embed is not None:
            self.ctx_embed.backward(dtok.sum(axis=0))
        self.embed.backward(dtok)


class OperationPolicy:
    """Two-layer MLP from the 23-dim state (mask bits ++ head descriptor)
    to 16 operation logits; sampling goes through the same mask."""

    def __init__(self, store: nn.ParamStore, name: str, rng: np.random.Generator,
                 hidden: int = MLP_HIDDEN):
        self.store = store
        self.mlp = nn.MLP(store, name, [OP_STATE_DIM, hidden, N_OPERATIONS], rng,
                          zero_head=True)

    @staticmethod
    def state_vector(mask: np.ndarray, f1_desc: np.ndarray) -> np.ndarray:
        return np.concatenate([mask, f1_desc])

    def forward(self, op_state: np.ndarray) -> np.ndarray:
        return self.mlp.forward(state.compress(op_state))

    def backward(self, dlogits: np.ndarray) -> None:
        self.mlp.backward(dlogits)


class ValueNet:
    """Four-layer MLP critic over the two-branch state.

    With use_attn the input is the full 98-dim [stats, attention] state and
    value-loss gradients flow into the attention encoder; otherwise the
    critic sees only the 49 statistics entries.
    """

    def __init__(self, store: nn.ParamStore, name: str, d_model: int,
                 n_heads: int, rng: np.random.Generator, use_attn: bool = True,
                 hidden: int = MLP_HIDDEN):
        self.store = store
        self.use_attn = use_attn
        self.attn = None
        if use_attn:
            self.attn = state.AttnBranch(store, f"{name}.attn", d_model, n_heads, rng)
        self.input_dim = state.CRITIC_STATE_DIM if use_attn else state.STATS_DIM
        self.mlp = nn.MLP(store, f"{name}.mlp",
                          [self.input_dim, hidden, hidden, hidden, 1], rng,
                          zero_head=True)

    def critic_state(self, desc: np.ndarray, stats: np.ndarray) -> np.ndarray:
        if self.use_attn:
            return np.concatenate([stats, self.attn.forward(desc)])
        return np.asarray(stats, dtype=np.float64)

    def forward(self, desc: np.ndarray, stats: np.ndarray) -> float:
        s = self.critic_state(desc, stats)
        if len(s) != self.input_dim:
            raise ValueError(f"critic state must have length {self.input_dim}")
        return float(self.mlp.forward(s)[0])

    def backward(self, dvalue: float) -> None:
        ds = self.mlp.backward(np.array([dvalue]))
        if self.use_attn:
            self.attn.backward(ds[state.STATS_DIM:])


def tail_action_mask(n: int, f1_index: int, op_id: int) -> np.ndarray:
    """All pool indices are legal except f1 itself under sub/div."""
    mask = np.ones(n)
    if op_id in SELF_MASKED_OPS:
        mask[f1_index] = 0.0
    return mask


@dataclass
class AgentSystem:
    """The three policies plus one shared critic (or three under the
    separate-critics ablation), each backed by its own parameter store."""

    head: FeaturePolicy
    op: OperationPolicy
    tail: FeaturePolicy
    critics: list[ValueNet]
    variant: str

    @property
    def shared_critic(self) -> bool:
        return len(self.critics) == 1

    def critic_for(self, agent: str) -> ValueNet:
        if self.shared_critic:
            return self.critics[0]
        return self.critics[{"head": 0, "op": 1, "tail": 2}[agent]]

    def stores(self) -> dict[str, nn.ParamStore]:
        out = {"head": self.head.store, "op": self.op.store, "tail": self.tail.store}
        for i, critic in enumerate(self.critics):
            out[f"critic{i}"] = critic.store
        return out

    def snapshot(self) -> dict[str, dict[str, np.ndarray]]:
        return {k: s.snapshot() for k, s in self.stores().items()}

    def restore(self, snap: dict[str, dict[str, np.ndarray]]) -> None:
        for k, s in self.stores().items():
            s.restore(snap[k])

    def save(self, prefix) -> None:
        for k, s in self.stores().items():
            s.save(f"{prefix}.{k}")

    def load(self, prefix) -> None:
        for k, s in self.stores().items():
            s.load(f"{prefix}.{k}")


def build_agents(d_model: int, n_heads: int, n_encoder_layers: int,
                 variant: str, rng: np.random.Generator) -> AgentSystem:
    head = FeaturePolicy(nn.ParamStore(), "head", d_model, n_heads,
                         n_encoder_layers, rng)
    op = OperationPolicy(nn.ParamStore(), "op", rng)
    tail = FeaturePolicy(nn.ParamStore(), "tail", d_model, n_heads,
                         n_encoder_layers, rng, context_dim=TAIL_CONTEXT_DIM)
    use_attn = variant != "stats-only"
    n_critics = 3 if variant == "no-shared-critic" else 1
    critics = [ValueNet(nn.ParamStore(), f"critic{i}", d_model, n_heads, rng,
                        use_attn=use_attn) for i in range(n_critics)]
    return AgentSystem(head=head, op=op, tail=tail, critics=critics, variant=variant)
