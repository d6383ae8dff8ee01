"""Central finite-difference verification of every hand-written backward
pass, from single kernels up to the four full networks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn, state
from .agents import FeaturePolicy, OperationPolicy, ValueNet, TAIL_CONTEXT_DIM

FD_STEP = 1e-5
REL_TOL = 1e-4
NEGLIGIBLE = 1e-7


def max_rel_error(store: nn.ParamStore, loss_fn: Callable[[], float],
                  h: float = FD_STEP) -> float:
    """Worst relative disagreement between store gradients and central
    differences of loss_fn over every parameter entry.

    Entries where both gradients are below 1e-7 in magnitude count as exact;
    at that scale the finite-difference estimate is dominated by rounding.
    """
    worst = 0.0
    for p in store.params.values():
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn()
            flat[i] = orig - h
            f_minus = loss_fn()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(numeric), abs(gflat[i]))
            if denom > NEGLIGIBLE:
                worst = max(worst, abs(numeric - gflat[i]) / denom)
    return worst


def _input_as_param(store: nn.ParamStore, name: str, value: np.ndarray) -> nn.Param:
    return store.create_const(name, value)


@dataclass
class CheckResult:
    name: str
    error: float

    @property
    def ok(self) -> bool:
        return self.error < REL_TOL


def _weighted(out: np.ndarray, weights: np.ndarray) -> float:
    return float(np.sum(out * weights))


def check_linear(seed: int) -> float:
    rng = np.random.default_rng(seed)
    store = nn.ParamStore()
    layer = nn.Linear(store, "lin", 5, 4, rng)
    x = _input_as_param(store, "x", rng.standard_normal((3, 5)))
    w = rng.standard_normal((3, 4))

    def loss() -> float:
        return _weighted(layer.forward(x.data), w)

    store.zero_grad()
    loss()
    x.grad += layer.backward(w)
    return max_rel_error(store, loss)


def check_leaky_relu(seed: int) -> float:
    rng = np.random.default_rng(seed)
    store = nn.ParamStore()
    act = nn.LeakyReLU()
    raw = rng.standard_normal((4, 6))
    raw = np.where(np.abs(raw) < 0.05, raw + np.sign(raw + 1e-12) * 0.1, raw)
    x = _input_as_param(store, "x", raw)
    w = rng.standard_normal((4, 6))

    def loss() -> float:
        return _weighted(act.forward(x.data), w)

    store.zero_grad()
    loss()
    x.grad += act.backward(w)
    return max_rel_error(store, loss)


def check_layernorm(seed: int) -> float:
    rng = np.random.default_rng(seed)
    store = nn.ParamStore()
    ln = nn.LayerNorm(store, "ln", 6)
    ln.gamma.data[...] = rng.uniform(0.5, 1.5, 6)
    ln.beta.data[...] = rng.standard_normal(6)
    x = _input_as_param(store, "x", rng.standard_normal((3, 6)))
    w = rng.standard_normal((3, 6))

    def loss() -> float:
        return _weighted(ln.forward(x.data), w)

    store.zero_grad()
    loss()
    x.grad += ln.backward(w)
    return max_rel_error(store, loss)


def check_masked_softmax(seed: int) -> float:
    rng = np.random.default_rng(seed)
    store = nn.ParamStore()
    logits = _input_as_param(store, "z", rng.standard_normal(8))
    mask = (rng.random(8) > 0.3).astype(float)
    mask[0] = 1.0
    w = rng.standard_normal(8)

    def loss() -> float:
        return _weighted(nn.masked_softmax(logits.data, mask), w)

    store.zero_grad()
    p = nn.masked_softmax(logits.data, mask)
    # softmax jacobian: dz = p * (w - sum(w*p))
    logits.grad += p * (w - np.sum(w * p))
    return max_rel_error(store, loss)


def check_encoder_block(seed: int) -> float:
    rng = np.random.default_rng(seed)
    store = nn.ParamStore()
    block = nn.EncoderBlock(store, "enc", 8, 2, rng)
    x = _input_as_param(store, "x", rng.standard_normal((3, 8)))
    w = rng.standard_normal((3, 8))

    def loss() -> float:
        return _weighted(block.forward(x.data), w)

    store.zero_grad()
    loss()
    x.grad += block.backward(w)
    return max_rel_error(store, loss)


def _policy_logp_check(net, forward_args: tuple, mask: np.ndarray,
                       action: int) -> Callable[[], float]:
    def loss() -> float:
        p = nn.masked_softmax(net.forward(*forward_args), mask)
        return float(np.log(p[action]))

    return loss


def _backprop_logp(net, forward_args: tuple, mask: np.ndarray, action: int) -> None:
    p = nn.masked_softmax(net.forward(*forward_args), mask)
    one_hot = np.zeros_like(p)
    one_hot[action] = 1.0
    net.backward(one_hot - p)


def check_head_policy(seed: int, n_tokens: int = 4) -> float:
    rng = np.random.default_rng(seed)
    net = FeaturePolicy(nn.ParamStore(), "head", 4, 2, 2, rng)
    desc = rng.standard_normal((n_tokens, state.DESCRIPTOR_DIM))
    mask = np.ones(n_tokens)
    action = int(rng.integers(n_tokens))
    net.store.zero_grad()
    _backprop_logp(net, (desc,), mask, action)
    return max_rel_error(net.store, _policy_logp_check(net, (desc,), mask, action))


def check_tail_policy(seed: int, n_tokens: int = 4) -> float:
    rng = np.random.default_rng(seed)
    net = FeaturePolicy(nn.ParamStore(), "tail", 4, 2, 2, rng,
                        context_dim=TAIL_CONTEXT_DIM)
    desc = rng.standard_normal((n_tokens, state.DESCRIPTOR_DIM))
    ctx = rng.standard_normal(TAIL_CONTEXT_DIM)
    mask = np.ones(n_tokens)
    mask[int(rng.integers(n_tokens))] = 0.0 if n_tokens > 1 else 1.0
    valid = np.flatnonzero(mask)
    action = int(rng.choice(valid))
    net.store.zero_grad()
    _backprop_logp(net, (desc, ctx), mask, action)
    return max_rel_error(net.store, _policy_logp_check(net, (desc, ctx), mask, action))


def check_op_policy(seed: int) -> float:
    rng = np.random.default_rng(seed)
    net = OperationPolicy(nn.ParamStore(), "op", rng, hidden=16)
    from .agents import OP_STATE_DIM

    x = rng.standard_normal(OP_STATE_DIM)
    mask = (rng.random(16) > 0.4).astype(float)
    mask[0] = 1.0
    valid = np.flatnonzero(mask)
    action = int(rng.choice(valid))
    net.store.zero_grad()
    _backprop_logp(net, (x,), mask, action)
    return max_rel_error(net.store, _policy_logp_check(net, (x,), mask, action))


def check_critic(seed: int, n_tokens: int = 3) -> float:
    rng = np.random.default_rng(seed)
    net = ValueNet(nn.ParamStore(), "critic", 4, 2, rng, use_attn=True, hidden=12)
    desc = rng.standard_normal((n_tokens, state.DESCRIPTOR_DIM))
    stats = rng.standard_normal(state.STATS_DIM)

    def loss() -> float:
        return net.forward(desc, stats)

    net.store.zero_grad()
    loss()
    net.backward(1.0)
    return max_rel_error(net.store, loss)


KERNEL_CHECKS = {
    "linear": check_linear,
    "leaky_relu": check_leaky_relu,
    "layernorm": check_layernorm,
    "masked_softmax": check_masked_softmax,
    "encoder_block": check_encoder_block,
}

NETWORK_CHECKS = {
    "head_policy": check_head_policy,
    "op_policy": check_op_policy,
    "tail_policy": check_tail_policy,
    "critic": check_critic,
}


def run_all(n_instances: int = 20, base_seed: int = 0,
            verbose: bool = False) -> list[CheckResult]:
    results = []
    for name, fn in {**KERNEL_CHECKS, **NETWORK_CHECKS}.items():
        err = max(fn(base_seed + 1000 * i) for i in range(n_instances))
        results.append(CheckResult(name, err))
        if verbose:
            status = "ok" if err < REL_TOL else "FAIL"
            print(f"  {name:<16s} max rel err {err:.3e}  [{status}]")
    return results
