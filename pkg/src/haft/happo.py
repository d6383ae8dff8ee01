"""Trajectory collection and the sequential trust-region update.

One update round: GAE from the stored rollout values, then clipped policy
steps in the fixed order head -> operation -> tail, re-weighting each later
agent's advantage by the importance ratios of the agents already updated in
the round, and finally the critic regression on the GAE returns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .agents import AgentSystem

RATIO_CLAMP_LO = 1e-4
RATIO_CLAMP_HI = 1e4


@dataclass
class Trajectory:
    """Per-step rollout records for one episode.

    Tail entries exist only at binary-operation steps; ``tail_steps`` holds
    the step indices they belong to. ``values`` has one row per critic
    (a single row when the critic is shared).
    """

    desc: list[np.ndarray] = field(default_factory=list)
    stats: list[np.ndarray] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)
    redundancy: list[float] = field(default_factory=list)
    relevance: list[float] = field(default_factory=list)

    head_actions: list[int] = field(default_factory=list)
    head_logps: list[float] = field(default_factory=list)

    op_states: list[np.ndarray] = field(default_factory=list)
    op_masks: list[np.ndarray] = field(default_factory=list)
    op_actions: list[int] = field(default_factory=list)
    op_logps: list[float] = field(default_factory=list)

    tail_steps: list[int] = field(default_factory=list)
    tail_contexts: list[np.ndarray] = field(default_factory=list)
    tail_masks: list[np.ndarray] = field(default_factory=list)
    tail_actions: list[int] = field(default_factory=list)
    tail_logps: list[float] = field(default_factory=list)

    values: np.ndarray | None = None  # (n_critics, T)
    bootstrap: np.ndarray | None = None  # (n_critics,)

    def __len__(self) -> int:
        return len(self.rewards)

    def finalize(self, values: np.ndarray, bootstrap: np.ndarray) -> None:
        self.values = np.atleast_2d(np.asarray(values, dtype=np.float64))
        self.bootstrap = np.atleast_1d(np.asarray(bootstrap, dtype=np.float64))
        if self.values.shape[1] != len(self):
            raise ValueError("value series length does not match the trajectory")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("trajectory rewards must be finite")


@dataclass
class TrainHyper:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 4
    lr_head: float = 1e-3
    lr_op: float = 1e-3
    lr_tail: float = 1e-3
    lr_critic: float = 1e-3
    entropy_coef: float = 0.05
    beta_id: float = 0.01
    beta_iv: float = 0.01
    info_terms: str = "reward"  # "reward": shaped rewards; "loss": constants in loss
    no_decomposition: bool = False


def gae(rewards: np.ndarray, values: np.ndarray, bootstrap_value: float,
        gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Reverse-recursive generalized advantage estimation.

    delta_t = r_t + gamma*V_{t+1} - V_t with V_T = bootstrap;
    A_t = delta_t + gamma*lam*A_{t+1}; returns R_t = A_t + V_t.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape:
        raise ValueError("rewards and values must have equal length")
    t_len = len(rewards)
    adv = np.zeros(t_len)
    nxt = 0.0
    for t in range(t_len - 1, -1, -1):
        v_next = bootstrap_value if t == t_len - 1 else values[t + 1]
        delta = rewards[t] + gamma * v_next - values[t]
        nxt = delta + gamma * lam * nxt
        adv[t] = nxt
    return adv, adv + values


@dataclass
class AdvantageSet:
    advantages: np.ndarray
    returns: np.ndarray
    adv_head: np.ndarray
    adv_op: np.ndarray
    adv_tail: np.ndarray  # aligned with traj.tail_steps
    ratio_warnings: int = 0


def _clamped_ratio(new_logp: np.ndarray, old_logp: np.ndarray) -> tuple[np.ndarray, int]:
    ratio = np.exp(np.asarray(new_logp) - np.asarray(old_logp))
    bad = ~np.isfinite(ratio)
    warnings = int(bad.sum() + (ratio > RATIO_CLAMP_HI).sum()
                   + (ratio < RATIO_CLAMP_LO).sum())
    ratio = np.where(bad, RATIO_CLAMP_HI, ratio)
    return np.clip(ratio, RATIO_CLAMP_LO, RATIO_CLAMP_HI), warnings


def recompute_head_logps(traj: Trajectory, system: AgentSystem) -> np.ndarray:
    out = np.empty(len(traj))
    for t in range(len(traj)):
        p = nn.softmax(system.head.forward(traj.desc[t]))
        out[t] = np.log(p[traj.head_actions[t]])
    return out


def recompute_op_logps(traj: Trajectory, system: AgentSystem) -> np.ndarray:
    out = np.empty(len(traj))
    for t in range(len(traj)):
        logits = system.op.forward(traj.op_states[t])
        p = nn.masked_softmax(logits, traj.op_masks[t])
        out[t] = np.log(p[traj.op_actions[t]])
    return out


def decompose_advantages(traj: Trajectory, system: AgentSystem,
                         advantages: np.ndarray, returns: np.ndarray,
                         no_decomposition: bool = False) -> AdvantageSet:
    """Advantage factors per agent, re-evaluating already-updated policies.

    The head keeps the raw GAE advantage. The operation agent's factor is
    the head's new/old probability ratio times the advantage, and the tail's
    multiplies in the operation ratio as well (binary steps only). With
    no_decomposition every agent sees the raw advantage.
    """
    adv = np.asarray(advantages, dtype=np.float64)
    tail_idx = np.asarray(traj.tail_steps, dtype=np.int64)
    if no_decomposition:
        return AdvantageSet(adv, returns, adv.copy(), adv.copy(),
                            adv[tail_idx] if len(tail_idx) else np.zeros(0))
    head_ratio, warn1 = _clamped_ratio(recompute_head_logps(traj, system),
                                       np.asarray(traj.head_logps))
    op_ratio, warn2 = _clamped_ratio(recompute_op_logps(traj, system),
                                     np.asarray(traj.op_logps))
    adv_op = head_ratio * adv
    adv_tail = (head_ratio * op_ratio * adv)[tail_idx] if len(tail_idx) else np.zeros(0)
    return AdvantageSet(adv, returns, adv.copy(), adv_op, adv_tail,
                        ratio_warnings=warn1 + warn2)


def clipped_surrogate(ratio: np.ndarray, factors: np.ndarray,
                      clip_eps: float) -> np.ndarray:
    """Element-wise pessimistic-min clipped objective contributions."""
    ratio = np.asarray(ratio, dtype=np.float64)
    factors = np.asarray(factors, dtype=np.float64)
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    return np.minimum(ratio * factors, clipped * factors)


def policy_loss_value(surrogate_mean: float, entropy_mean: float,
                      hyper: TrainHyper, id_mean: float = 0.0,
                      iv_mean: float = 0.0) -> float:
    """L = -L_CLIP - beta_i*H (+ beta_id*Id - beta_iv*Iv in loss mode).

    The redundancy/relevance terms are measured constants of the sampled
    features: they move the loss value but carry no policy gradient. In the
    default "reward" mode they shape the reward instead and are omitted here.
    """
    loss = -surrogate_mean - hyper.entropy_coef * entropy_mean
    if hyper.info_terms == "loss":
        loss += hyper.beta_id * id_mean - hyper.beta_iv * iv_mean
    return loss


@dataclass
class AgentUpdateStats:
    loss: float = 0.0
    entropy: float = 0.0
    clip_fraction: float = 0.0
    mean_abs_ratio_dev: float = 0.0
    steps: int = 0

    def to_dict(self) -> dict:
        return {"loss": self.loss, "entropy": self.entropy,
                "clip_fraction": self.clip_fraction,
                "mean_abs_ratio_dev": self.mean_abs_ratio_dev,
                "steps": self.steps}


@dataclass
class UpdateReport:
    head: AgentUpdateStats
    op: AgentUpdateStats
    tail: AgentUpdateStats
    value_losses: list[float]
    adv_op_max_dev: float
    adv_tail_max_dev: float
    ratio_warnings: int
    first_ratio_max_dev: float
    aborted: bool = False

    def to_dict(self) -> dict:
        return {"head": self.head.to_dict(), "op": self.op.to_dict(),
                "tail": self.tail.to_dict(), "value_losses": self.value_losses,
                "adv_op_max_dev": self.adv_op_max_dev,
                "adv_tail_max_dev": self.adv_tail_max_dev,
                "ratio_warnings": self.ratio_warnings,
                "first_ratio_max_dev": self.first_ratio_max_dev,
                "aborted": self.aborted}


def _policy_epoch(agent: str, traj: Trajectory, system: AgentSystem,
                  factors: np.ndarray, hyper: TrainHyper, lr: float) -> AgentUpdateStats:
    """One full-batch clipped gradient step for a single agent."""
    if agent == "head":
        net, steps = system.head, list(range(len(traj)))
        old_logps = traj.head_logps
    elif agent == "op":
        net, steps = system.op, list(range(len(traj)))
        old_logps = traj.op_logps
    else:
        net, steps = system.tail, list(traj.tail_steps)
        old_logps = traj.tail_logps

    t_batch = len(steps)
    net.store.zero_grad()
    surrs, ents, ratios = [], [], []
    id_vals = np.asarray(traj.redundancy)
    iv_vals = np.asarray(traj.relevance)
    for pos, t in enumerate(steps):
        if agent == "head":
            logits = net.forward(traj.desc[t])
            mask = np.ones_like(logits)
            action, old_lp = traj.head_actions[pos], old_logps[pos]
        elif agent == "op":
            logits = net.forward(traj.op_states[t])
            mask = traj.op_masks[t]
            action, old_lp = traj.op_actions[pos], old_logps[pos]
        else:
            logits = net.forward(traj.desc[t], context=traj.tail_contexts[pos])
            mask = traj.tail_masks[pos]
            action, old_lp = traj.tail_actions[pos], old_logps[pos]

        p = nn.masked_softmax(logits, mask)
        logp = np.log(p[action])
        ratio = np.exp(logp - old_lp)
        m = factors[pos]
        unclipped = ratio * m
        clipped = np.clip(ratio, 1.0 - hyper.clip_eps, 1.0 + hyper.clip_eps) * m
        surrs.append(min(unclipped, clipped))
        ent = nn.entropy(p)
        ents.append(ent)
        ratios.append(ratio)

        # d surrogate / d logp: gradient flows only when the unclipped branch wins
        g_surr = m * ratio if unclipped <= clipped else 0.0
        one_hot = np.zeros_like(p)
        one_hot[action] = 1.0
        dlogp_dz = one_hot - p
        safe_logp = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), 0.0)
        dent_dz = -p * (safe_logp + ent)
        dloss_dz = (-g_surr / t_batch) * dlogp_dz \
            + (-hyper.entropy_coef / t_batch) * dent_dz
        net.backward(dloss_dz)

    loss = policy_loss_value(float(np.mean(surrs)), float(np.mean(ents)), hyper,
                             float(np.mean(id_vals)) if len(id_vals) else 0.0,
                             float(np.mean(iv_vals)) if len(iv_vals) else 0.0)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite {agent} policy loss")
    net.store.adam_step(lr)
    ratios = np.asarray(ratios)
    return AgentUpdateStats(
        loss=float(loss), entropy=float(np.mean(ents)),
        clip_fraction=float(np.mean(np.abs(ratios - 1.0) > hyper.clip_eps)),
        mean_abs_ratio_dev=float(np.mean(np.abs(ratios - 1.0))), steps=t_batch)


def critic_loss(values: np.ndarray, returns: np.ndarray) -> float:
    """One-half mean squared error between predictions and GAE returns."""
    values = np.asarray(values, dtype=np.float64)
    returns = np.asarray(returns, dtype=np.float64)
    if values.shape != returns.shape:
        raise ValueError("values and returns must have equal length")
    return float(0.5 * np.mean((values - returns) ** 2))


def _critic_epoch(critic, traj: Trajectory, returns: np.ndarray, lr: float) -> float:
    t_len = len(traj)
    critic.store.zero_grad()
    preds = np.empty(t_len)
    for t in range(t_len):
        preds[t] = critic.forward(traj.desc[t], traj.stats[t])
        critic.backward((preds[t] - returns[t]) / t_len)
    loss = critic_loss(preds, returns)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite critic loss")
    critic.store.adam_step(lr)
    return loss


def sequential_update(traj: Trajectory, system: AgentSystem,
                      hyper: TrainHyper) -> UpdateReport:
    """Run one full update round over a completed trajectory.

    A non-finite loss anywhere aborts the round and restores every network
    to its pre-round parameters.
    """
    if traj.values is None:
        raise ValueError("trajectory must be finalized before updating")
    snap = system.snapshot()
    rewards = np.asarray(traj.rewards, dtype=np.float64)

    adv_by_critic, ret_by_critic = [], []
    for c in range(traj.values.shape[0]):
        a, r = gae(rewards, traj.values[c], float(traj.bootstrap[c]),
                   hyper.gamma, hyper.lam)
        adv_by_critic.append(a)
        ret_by_critic.append(r)

    def critic_index(agent: str) -> int:
        return 0 if system.shared_critic else {"head": 0, "op": 1, "tail": 2}[agent]

    try:
        pre = decompose_advantages(traj, system, adv_by_critic[critic_index("head")],
                                   ret_by_critic[0], hyper.no_decomposition)
        first_ratio_dev = float(np.max(np.abs(
            np.exp(recompute_head_logps(traj, system) - np.asarray(traj.head_logps)) - 1.0)))
        del pre

        head_stats = None
        for _ in range(hyper.epochs):
            head_stats = _policy_epoch("head", traj, system,
                                       adv_by_critic[critic_index("head")],
                                       hyper, hyper.lr_head)

        after_head = decompose_advantages(traj, system,
                                          adv_by_critic[critic_index("op")],
                                          ret_by_critic[0], hyper.no_decomposition)
        op_stats = None
        for _ in range(hyper.epochs):
            op_stats = _policy_epoch("op", traj, system, after_head.adv_op,
                                     hyper, hyper.lr_op)

        after_op = decompose_advantages(traj, system,
                                        adv_by_critic[critic_index("tail")],
                                        ret_by_critic[0], hyper.no_decomposition)
        tail_stats = AgentUpdateStats()
        if traj.tail_steps:
            for _ in range(hyper.epochs):
                tail_stats = _policy_epoch("tail", traj, system,
                                           after_op.adv_tail, hyper, hyper.lr_tail)

        value_losses = []
        for c, critic in enumerate(system.critics):
            loss = 0.0
            for _ in range(hyper.epochs):
                loss = _critic_epoch(critic, traj, ret_by_critic[c], hyper.lr_critic)
            value_losses.append(loss)

        base_adv = adv_by_critic[critic_index("op")]
        tail_idx = np.asarray(traj.tail_steps, dtype=np.int64)
        adv_op_dev = float(np.max(np.abs(after_head.adv_op - base_adv))) if len(traj) else 0.0
        adv_tail_dev = 0.0
        if len(tail_idx):
            base_tail = adv_by_critic[critic_index("tail")][tail_idx]
            adv_tail_dev = float(np.max(np.abs(after_op.adv_tail - base_tail)))
        return UpdateReport(
            head=head_stats, op=op_stats, tail=tail_stats,
            value_losses=value_losses, adv_op_max_dev=adv_op_dev,
            adv_tail_max_dev=adv_tail_dev,
            ratio_warnings=after_head.ratio_warnings + after_op.ratio_warnings,
            first_ratio_max_dev=first_ratio_dev)
    except FloatingPointError:
        system.restore(snap)
        empty = AgentUpdateStats()
        return UpdateReport(head=empty, op=empty, tail=empty, value_losses=[],
                            adv_op_max_dev=0.0, adv_tail_max_dev=0.0,
                            ratio_warnings=0, first_ratio_max_dev=0.0, aborted=True)
