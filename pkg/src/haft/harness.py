"""Experiment loop: episode management, baselines, trace bookkeeping and
report emission.

Every run is driven by one master seed; action sampling, parameter
initialization and fold assignment each draw from their own derived stream,
so two runs with the same config and seed produce byte-identical traces.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import features, happo, measures, nn, state
from .agents import AgentSystem, build_agents, tail_action_mask
from .data import CLASSIFICATION, Dataset, RunConfig, config_to_dict, split
from .downstream import (EvalProtocol, evaluate, metric_for_task,
                         reward_from_score, _fit, _score)
from .features import (BINARY_IDS, FeaturePool, OPERATIONS, apply_binary,
                       apply_unary, evaluate_tree, init_pool, is_binary,
                       pool_to_csv, provenance_to_json, valid_mask)
from .state import RunningNormalizer, descriptor_matrix, op_onehot, stats_vector

RDG = "rdg"
ERG = "erg"
BASELINE_KINDS = (RDG, ERG)


@dataclass
class RunReport:
    method: str
    seed: int
    variant: str
    config: dict
    task: str
    baseline_train_score: float
    best_train_score: float
    test_score_topk: float
    test_score_full: float
    episodes_run: int
    eval_calls: int
    wall_time_s: float
    curve: list[dict] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list)
    train_log: list[dict] = field(default_factory=list)
    best_pool: FeaturePool | None = None
    critic_input_dim: int = 0
    critic_param_count: int = 0
    system: AgentSystem | None = None

    def summary(self) -> dict:
        return {
            "method": self.method, "seed": self.seed, "variant": self.variant,
            "task": self.task, "config": self.config,
            "baseline_train_score": self.baseline_train_score,
            "best_train_score": self.best_train_score,
            "test_score_topk": self.test_score_topk,
            "test_score_full": self.test_score_full,
            "episodes_run": self.episodes_run, "eval_calls": self.eval_calls,
            "wall_time_s": self.wall_time_s,
            "critic_input_dim": self.critic_input_dim,
            "critic_param_count": self.critic_param_count,
            "best_pool_size": self.best_pool.size if self.best_pool else 0,
        }


def _protocol(config: RunConfig, task: str) -> EvalProtocol:
    return EvalProtocol(model=config.downstream_model, folds=config.folds,
                        seed=config.seed, metric=metric_for_task(task),
                        knn_neighbors=config.knn_neighbors,
                        ridge_alpha=config.ridge_alpha)


def _hyper(config: RunConfig) -> happo.TrainHyper:
    return happo.TrainHyper(
        gamma=config.gamma, lam=config.gae_lambda, clip_eps=config.clip_eps,
        epochs=config.epochs_per_update, lr_head=config.lr, lr_op=config.lr,
        lr_tail=config.lr, lr_critic=config.lr,
        entropy_coef=config.entropy_coef, beta_id=config.beta_id,
        beta_iv=config.beta_iv, info_terms=config.info_terms,
        no_decomposition=config.variant == "no-decomp")


class _Evaluator:
    """Counts downstream evaluation calls so budget parity can be audited."""

    def __init__(self, config: RunConfig, train: Dataset):
        self.config = config
        self.train = train
        self.proto = _protocol(config, train.task)
        self.y_codes = measures.discretize_target(train.target, train.task)
        self.calls = 0

    def score(self, pool: FeaturePool) -> float:
        self.calls += 1
        return evaluate(pool, self.train.target, self.config.top_k, self.proto,
                        self.config.select_method).score

    def info_scores(self, pool: FeaturePool) -> tuple[float, float]:
        chosen = measures.top_k_select(pool, self.y_codes, self.config.top_k,
                                       self.config.select_method)
        cols = [measures.quantile_discretize(pool.features[i].values)
                for i in chosen]
        return (measures.redundancy_id(cols),
                measures.relevance_iv(cols, self.y_codes))


def _shaped_reward(score: float, prev: float, id_t: float, iv_t: float,
                   config: RunConfig) -> float:
    r = reward_from_score(score, config.reward_mode,
                          prev if config.reward_mode == "delta" else None)
    if config.info_terms == "reward":
        r += -config.beta_id * id_t + config.beta_iv * iv_t
    return r


def _sample_op_with_fallback(dist_fn, mask: np.ndarray, pool_size: int,
                             rng: np.random.Generator) -> tuple[int, float, np.ndarray]:
    """Sample an operation; a binary op with no legal tail action masks that
    op out and resamples (only reachable on a single-feature pool)."""
    mask = mask.copy()
    while True:
        p = dist_fn(mask)
        op_id, logp = nn.sample_index(p, rng)
        if is_binary(op_id) and pool_size == 1 and op_id in \
                (features.OP_INDEX["sub"], features.OP_INDEX["div"]):
            mask[op_id] = 0.0
            if mask.sum() == 0:
                raise RuntimeError("no valid operation remains")
            continue
        return op_id, logp, mask


def run_experiment(config: RunConfig, dataset: Dataset) -> RunReport:
    """Full training run: split, per-episode rollouts with sequential policy
    updates, global best-pool tracking, held-out test scoring."""
    t0 = time.perf_counter()
    config.validate()
    train, test = split(dataset, config.train_fraction, config.seed)
    evaluator = _Evaluator(config, train)
    hyper = _hyper(config)

    seeds = np.random.SeedSequence(config.seed).spawn(2)
    param_rng = np.random.default_rng(seeds[0])
    action_rng = np.random.default_rng(seeds[1])
    system = build_agents(config.d_model, config.n_heads, config.n_encoder_layers,
                          config.variant, param_rng)

    normalizer = RunningNormalizer()
    baseline_pool = init_pool(train, config.max_pool_size)
    baseline = evaluator.score(baseline_pool)
    best_score, best_pool = baseline, baseline_pool.copy()
    trace: list[dict] = []
    curve: list[dict] = []
    train_log: list[dict] = []
    episodes_run = 0
    stale = 0

    for episode in range(1, config.episodes + 1):
        pool = init_pool(train, config.max_pool_size)
        traj = happo.Trajectory()
        values = [[] for _ in system.critics]
        prev_score = baseline
        cumulative = 0.0
        episode_best = -np.inf
        rewards_ep = []

        for step in range(1, config.steps_per_episode + 1):
            desc = descriptor_matrix(pool)
            stats = stats_vector(pool, normalizer, update=True)
            for c, critic in enumerate(system.critics):
                values[c].append(critic.forward(desc, stats))

            head_p = nn.softmax(system.head.forward(desc))
            a1, lp1 = nn.sample_index(head_p, action_rng)
            f1 = pool.features[a1]
            mask = valid_mask(f1)
            op_state_vec = np.concatenate([mask, desc[a1]])

            def op_dist(m: np.ndarray) -> np.ndarray:
                return nn.masked_softmax(system.op.forward(
                    np.concatenate([m, desc[a1]])), m)

            op_id, lp_op, used_mask = _sample_op_with_fallback(
                op_dist, mask, pool.size, action_rng)
            if not np.array_equal(used_mask, mask):
                op_state_vec = np.concatenate([used_mask, desc[a1]])

            if is_binary(op_id):
                tmask = tail_action_mask(pool.size, a1, op_id)
                ctx = np.concatenate([desc[a1], op_onehot(op_id)])
                tail_p = nn.masked_softmax(system.tail.forward(desc, context=ctx),
                                           tmask)
                a2, lp2 = nn.sample_index(tail_p, action_rng)
                new_feat = apply_binary(op_id, f1, pool.features[a2])
                f2_name = pool.features[a2].name
                traj.tail_steps.append(len(traj.rewards))
                traj.tail_contexts.append(ctx)
                traj.tail_masks.append(tmask)
                traj.tail_actions.append(a2)
                traj.tail_logps.append(lp2)
            else:
                new_feat = apply_unary(op_id, f1)
                f2_name = "--"

            accepted = pool.add(new_feat)
            score = evaluator.score(pool)
            id_t, iv_t = evaluator.info_scores(pool)
            reward = _shaped_reward(score, prev_score, id_t, iv_t, config)
            delta = score - prev_score
            cumulative += delta

            traj.desc.append(desc)
            traj.stats.append(stats)
            traj.rewards.append(reward)
            traj.scores.append(score)
            traj.redundancy.append(id_t)
            traj.relevance.append(iv_t)
            traj.head_actions.append(a1)
            traj.head_logps.append(lp1)
            traj.op_states.append(op_state_vec)
            traj.op_masks.append(used_mask)
            traj.op_actions.append(op_id)
            traj.op_logps.append(lp_op)

            trace.append({"episode": episode, "step": step,
                          "f1": f1.name, "op": OPERATIONS[op_id].name,
                          "f2": f2_name, "accepted": bool(accepted),
                          "score": float(score), "delta": float(delta),
                          "cumulative": float(cumulative),
                          "reward": float(reward)})
            rewards_ep.append(reward)
            episode_best = max(episode_best, score)
            if score > best_score:
                best_score, best_pool = score, pool.copy()
                stale = -1
            prev_score = score

        final_desc = descriptor_matrix(pool)
        final_stats = stats_vector(pool, normalizer, update=True)
        boots = [critic.forward(final_desc, final_stats)
                 for critic in system.critics]
        traj.finalize(np.asarray(values), np.asarray(boots))
        report = happo.sequential_update(traj, system, hyper)
        train_log.append({"episode": episode, "last_score": float(prev_score),
                          "episode_best": float(episode_best),
                          "running_best": float(best_score),
                          **report.to_dict()})
        curve.append({"episode": episode, "last_score": float(prev_score),
                      "episode_best": float(episode_best),
                      "running_best": float(best_score),
                      "mean_reward": float(np.mean(rewards_ep))})
        episodes_run = episode
        stale += 1
        if config.early_stop_patience and stale >= config.early_stop_patience:
            break

    test_topk, test_full = score_on_test(best_pool, train, test, config)
    return RunReport(
        method="haft", seed=config.seed, variant=config.variant,
        config=config_to_dict(config), task=dataset.task,
        baseline_train_score=float(baseline), best_train_score=float(best_score),
        test_score_topk=float(test_topk), test_score_full=float(test_full),
        episodes_run=episodes_run, eval_calls=evaluator.calls,
        wall_time_s=time.perf_counter() - t0, curve=curve, trace=trace,
        train_log=train_log, best_pool=best_pool,
        critic_input_dim=system.critics[0].input_dim,
        critic_param_count=sum(c.store.param_count() for c in system.critics),
        system=system)


def run_baseline(kind: str, config: RunConfig, dataset: Dataset) -> RunReport:
    """RDG samples random transformation records under the same evaluation
    budget as the learned run; ERG is one budget-capped expansion pass
    followed by top-k reduction."""
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline kind: {kind!r}")
    t0 = time.perf_counter()
    config.validate()
    train, test = split(dataset, config.train_fraction, config.seed)
    evaluator = _Evaluator(config, train)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[1])

    baseline_pool = init_pool(train, config.max_pool_size)
    baseline = evaluator.score(baseline_pool)
    best_score, best_pool = baseline, baseline_pool.copy()
    trace: list[dict] = []
    curve: list[dict] = []

    if kind == RDG:
        for episode in range(1, config.episodes + 1):
            pool = init_pool(train, config.max_pool_size)
            prev_score = baseline
            cumulative = 0.0
            episode_best = -np.inf
            for step in range(1, config.steps_per_episode + 1):
                a1 = int(rng.integers(pool.size))
                f1 = pool.features[a1]
                mask = valid_mask(f1)
                if pool.size == 1:
                    mask = mask.copy()
                    mask[features.OP_INDEX["sub"]] = 0.0
                    mask[features.OP_INDEX["div"]] = 0.0
                valid_ops = np.flatnonzero(mask)
                op_id = int(rng.choice(valid_ops))
                if is_binary(op_id):
                    tmask = tail_action_mask(pool.size, a1, op_id)
                    a2 = int(rng.choice(np.flatnonzero(tmask)))
                    new_feat = apply_binary(op_id, f1, pool.features[a2])
                    f2_name = pool.features[a2].name
                else:
                    new_feat = apply_unary(op_id, f1)
                    f2_name = "--"
                accepted = pool.add(new_feat)
                score = evaluator.score(pool)
                delta = score - prev_score
                cumulative += delta
                trace.append({"episode": episode, "step": step, "f1": f1.name,
                              "op": OPERATIONS[op_id].name, "f2": f2_name,
                              "accepted": bool(accepted), "score": float(score),
                              "delta": float(delta),
                              "cumulative": float(cumulative),
                              "reward": float(score)})
                episode_best = max(episode_best, score)
                if score > best_score:
                    best_score, best_pool = score, pool.copy()
                prev_score = score
            episode_rows = [r for r in trace if r["episode"] == episode]
            curve.append({"episode": episode, "last_score": float(prev_score),
                          "episode_best": float(episode_best),
                          "running_best": float(best_score),
                          "mean_reward": float(np.mean(
                              [r["reward"] for r in episode_rows]))})
        episodes_run = config.episodes
    else:  # ERG
        pool = init_pool(train, config.max_pool_size)
        budget = config.episodes * config.steps_per_episode
        produced = 0
        originals = list(pool.features[:pool.n_original])
        for f in originals:
            if produced >= budget:
                break
            mask = valid_mask(f)
            for op_id in np.flatnonzero(mask[:len(features.UNARY_IDS)]):
                if produced >= budget:
                    break
                cand = apply_unary(int(op_id), f)
                accepted = pool.add(cand)
                produced += 1
                trace.append({"episode": 0, "step": produced, "f1": f.name,
                              "op": OPERATIONS[int(op_id)].name, "f2": "--",
                              "accepted": bool(accepted), "score": None,
                              "delta": 0.0, "cumulative": 0.0, "reward": 0.0})
        while produced < budget:
            i = int(rng.integers(len(originals)))
            j = int(rng.integers(len(originals)))
            op_id = int(rng.choice(BINARY_IDS))
            if i == j and op_id in (features.OP_INDEX["sub"], features.OP_INDEX["div"]):
                produced += 1
                continue
            cand = apply_binary(op_id, originals[i], originals[j])
            accepted = pool.add(cand)
            produced += 1
            trace.append({"episode": 0, "step": produced, "f1": originals[i].name,
                          "op": OPERATIONS[op_id].name, "f2": originals[j].name,
                          "accepted": bool(accepted), "score": None,
                          "delta": 0.0, "cumulative": 0.0, "reward": 0.0})
        chosen = measures.top_k_select(pool, evaluator.y_codes, config.top_k,
                                       config.select_method)
        reduced_feats = [pool.features[i] for i in chosen]
        n_orig = sum(1 for f in reduced_feats if "var" in f.provenance)
        reduced = FeaturePool(reduced_feats, n_original=n_orig,
                              max_size=config.max_pool_size)
        score = evaluator.score(reduced)
        if score > best_score:
            best_score, best_pool = score, reduced
        curve.append({"episode": 1, "last_score": float(score),
                      "episode_best": float(score),
                      "running_best": float(best_score),
                      "mean_reward": None})
        episodes_run = 1

    test_topk, test_full = score_on_test(best_pool, train, test, config)
    return RunReport(
        method=kind, seed=config.seed, variant=config.variant,
        config=config_to_dict(config), task=dataset.task,
        baseline_train_score=float(baseline), best_train_score=float(best_score),
        test_score_topk=float(test_topk), test_score_full=float(test_full),
        episodes_run=episodes_run, eval_calls=evaluator.calls,
        wall_time_s=time.perf_counter() - t0, curve=curve, trace=trace,
        best_pool=best_pool)


def materialize_pool(pool: FeaturePool, base_features: np.ndarray) -> np.ndarray:
    """Re-evaluate every pool feature's expression tree on new rows."""
    return np.column_stack([evaluate_tree(f.provenance, base_features)
                            for f in pool.features])


def score_on_test(pool: FeaturePool, train: Dataset, test: Dataset,
                  config: RunConfig) -> tuple[float, float]:
    """Fit on the training rows and score the held-out split, both with the
    top-k subset (headline number) and with the full pool."""
    proto = _protocol(config, train.task)
    y_codes = measures.discretize_target(train.target, train.task)
    chosen = measures.top_k_select(pool, y_codes, config.top_k,
                                   config.select_method)
    x_train = pool.matrix()
    x_test = materialize_pool(pool, test.features)

    def fit_score(cols: list[int]) -> float:
        model = _fit(proto, x_train[:, cols], train.target, seed=proto.seed)
        pred = model.predict(x_test[:, cols])
        return _score(proto.metric, test.target, pred)

    return fit_score(chosen), fit_score(list(range(pool.size)))


def replay_provenance(provenance_path: str | Path, dataset: Dataset,
                      config: RunConfig) -> dict:
    """Re-score a provenance file on a new dataset: rebuild every expression
    tree on the new rows, then run the usual cross-validated evaluation."""
    with open(provenance_path) as fh:
        trees = json.load(fh)
    cols = {name: evaluate_tree(tree, dataset.features)
            for name, tree in trees.items()}
    pool = FeaturePool(
        [features.Feature(values=v, name=name, provenance=trees[name])
         for name, v in cols.items()],
        n_original=sum(1 for t in trees.values() if "var" in t),
        max_size=max(config.max_pool_size, len(trees)))
    result = evaluate(pool, dataset.target, config.top_k,
                      _protocol(config, dataset.task), config.select_method)
    return {"score": result.score, "per_fold": result.per_fold,
            "n_features": pool.size}


def _json_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def emit_reports(report: RunReport, out_dir: str | Path) -> dict[str, Path]:
    """Write run.json, trace.jsonl, curve.csv, best_features.csv,
    provenance.json and train_log.jsonl into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "run": out / "run.json",
        "trace": out / "trace.jsonl",
        "curve": out / "curve.csv",
        "best_features": out / "best_features.csv",
        "provenance": out / "provenance.json",
        "train_log": out / "train_log.jsonl",
    }
    summary = report.summary()
    summary["best_pool_path"] = str(paths["best_features"])
    with open(paths["run"], "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    with open(paths["trace"], "w") as fh:
        for row in report.trace:
            fh.write(_json_line(row) + "\n")
    pd.DataFrame(report.curve).to_csv(paths["curve"], index=False)
    if report.best_pool is not None:
        pool_to_csv(report.best_pool, paths["best_features"])
        provenance_to_json(report.best_pool, paths["provenance"])
    with open(paths["train_log"], "w") as fh:
        for row in report.train_log:
            fh.write(_json_line(row) + "\n")
    if report.system is not None:
        ckpt = out / "checkpoints" / f"ep{report.episodes_run:04d}"
        report.system.save(ckpt)
        paths["checkpoint"] = ckpt
    return paths
