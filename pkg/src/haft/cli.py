"""Command-line entry point: run, baseline, gradcheck and replay."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import gradcheck
from .data import load_config, load_table, parse_task
from .harness import emit_reports, replay_provenance, run_baseline, run_experiment


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="CSV file with a header row")
    p.add_argument("--target", required=True, help="target column name")
    p.add_argument("--task", required=True, choices=["cls", "reg"])
    p.add_argument("--config", default=None, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", default="out", help="report directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="haft",
        description="Three-agent reinforcement learning for feature transformation")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="train the three-agent system")
    _add_data_args(run_p)
    run_p.add_argument("--variant", default=None,
                       choices=["full", "no-shared-critic", "no-decomp", "stats-only"])

    base_p = sub.add_parser("baseline", help="run a comparison baseline")
    _add_data_args(base_p)
    base_p.add_argument("--baseline", required=True, choices=["rdg", "erg"])

    grad_p = sub.add_parser("gradcheck", help="finite-difference kernel suite")
    grad_p.add_argument("--instances", type=int, default=20)
    grad_p.add_argument("--seed", type=int, default=0)

    replay_p = sub.add_parser("replay", help="re-score a provenance file")
    _add_data_args(replay_p)
    replay_p.add_argument("--provenance", required=True)
    return parser


def _load(args: argparse.Namespace):
    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if getattr(args, "variant", None):
        config.variant = args.variant
    config.validate()
    dataset = load_table(args.data, args.target, parse_task(args.task))
    return config, dataset


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            config, dataset = _load(args)
            report = run_experiment(config, dataset)
            paths = emit_reports(report, args.out)
            print(json.dumps({"best_train_score": report.best_train_score,
                              "test_score_topk": report.test_score_topk,
                              "out": str(paths["run"])}, indent=1))
        elif args.command == "baseline":
            config, dataset = _load(args)
            report = run_baseline(args.baseline, config, dataset)
            paths = emit_reports(report, args.out)
            print(json.dumps({"best_train_score": report.best_train_score,
                              "test_score_topk": report.test_score_topk,
                              "out": str(paths["run"])}, indent=1))
        elif args.command == "gradcheck":
            print(f"running gradient checks ({args.instances} instances per kernel)")
            results = gradcheck.run_all(args.instances, args.seed, verbose=True)
            if any(not r.ok for r in results):
                raise RuntimeError("gradient check failed")
            print("all gradient checks passed")
        elif args.command == "replay":
            config, dataset = _load(args)
            result = replay_provenance(args.provenance, dataset, config)
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            with open(out / "replay.json", "w") as fh:
                json.dump(result, fh, indent=1)
            print(json.dumps(result, indent=1))
        return 0
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        json.dump({"error": type(exc).__name__, "message": str(exc)},
                  sys.stderr, indent=1)
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
