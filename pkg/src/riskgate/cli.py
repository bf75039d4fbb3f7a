"""Command-line entry point: ``riskgate <command> ...``.

Commands: train, eval, sweep, compare, analyze-risk, theory-check. On failure
the process exits nonzero and prints a JSON object with an ``error`` field
(plus ``unknown_keys`` for config typos) to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import config as C
from . import experiment

DEFAULT_SEEDS = "42,123,456"


def _user_settings(args) -> dict:
    raw = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if path.suffix == ".json":
            data = json.loads(path.read_text())
            raw.update(data.get("config", data))
        else:
            raw.update(C.parse_config_text(path.read_text()))
    for key, attr in (("experiment.env", "env"), ("experiment.algorithm", "algorithm"), ("experiment.seed", "seed")):
        value = getattr(args, attr, None)
        if value is not None:
            raw[key] = str(value)
    raw.update(C.parse_overrides(getattr(args, "override", None)))
    return raw


def _seeds(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def _parse_grid(items) -> dict:
    grid = {}
    for item in items or ():
        if "=" not in item:
            raise C.ConfigError(f"grid entry {item!r} is not key=v1,v2,...")
        k, v = item.split("=", 1)
        grid[k.strip()] = [x.strip() for x in v.split(",") if x.strip()]
    unknown = sorted(k for k in grid if k not in C.base_defaults())
    if unknown:
        raise C.ConfigError("unknown config keys: " + ", ".join(unknown), unknown)
    return grid


def _default_run_dir(cfg: dict) -> Path:
    return Path("runs") / (f"{cfg['experiment.env']}_{cfg['experiment.algorithm']}"
                           f"_seed{cfg['experiment.seed']}_{C.config_hash(cfg)[:8]}")


def cmd_train(args) -> dict:
    cfg = C.resolve(_user_settings(args))
    run_dir = experiment.train(cfg, args.out or _default_run_dir(cfg))
    return {"run_dir": str(run_dir), "config_hash": C.config_hash(cfg),
            "metrics": json.loads((run_dir / "metrics.json").read_text())}


def cmd_eval(args) -> dict:
    return {"run_dir": args.run_dir, "metrics": experiment.evaluate(args.run_dir, args.episodes)}


def cmd_sweep(args) -> dict:
    cfg = C.resolve(_user_settings(args))
    rows = experiment.sweep(cfg, _parse_grid(args.grid), _seeds(args.seeds), args.out, args.workers)
    return {"out": args.out, "cells": len(rows), "failed": sum(r["n_failed"] for r in rows)}


def cmd_compare(args) -> dict:
    cfg = C.resolve(_user_settings(args))
    algos = [a.strip() for a in args.algorithms.split(",") if a.strip()]
    bad = [a for a in algos if a not in C.ALGORITHMS]
    if bad:
        raise C.ConfigError(f"unknown algorithms: {', '.join(bad)}")
    rows = experiment.compare(cfg, algos, _seeds(args.seeds), args.out, args.workers)
    return {"out": args.out, "table": str(Path(args.out) / "compare.csv"), "rows": len(rows)}


def cmd_analyze_risk(args) -> dict:
    return experiment.analyze_risk(args.run_dir, args.trace_steps)


def cmd_theory_check(args) -> dict:
    report = experiment.theory_check(args.out, tau=args.tau, beta=args.beta, replicates=args.replicates,
                                     seed=args.seed)
    return {"out": args.out, "passed": report["passed"]}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="riskgate", description="Risk-gated ensemble Q-learning experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        sp.add_argument("--config", help="flat config file, or a run manifest.json to replay")
        sp.add_argument("--env", choices=C.ENVS)
        sp.add_argument("--algorithm", choices=C.ALGORITHMS)
        sp.add_argument("--override", action="append", metavar="KEY=VALUE", help="repeatable")

    sp = sub.add_parser("train", help="train and evaluate one run")
    config_args(sp)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", help="run directory (default: runs/<env>_<algo>_seed<s>_<hash>)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="re-evaluate a run's saved models with learning frozen")
    sp.add_argument("run_dir")
    sp.add_argument("--episodes", type=int, help="episodes (navigation) or days (glucose)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="grid over config keys x seeds")
    config_args(sp)
    sp.add_argument("--grid", action="append", metavar="KEY=V1,V2", required=True)
    sp.add_argument("--seeds", default=DEFAULT_SEEDS)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("compare", help="algorithms x seeds, table-style CSV")
    config_args(sp)
    sp.add_argument("--algorithms", default="riskgated,unconstrained_q")
    sp.add_argument("--seeds", default=DEFAULT_SEEDS)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("analyze-risk", help="predicted vs post-hoc risk on a run's eval logs")
    sp.add_argument("run_dir")
    sp.add_argument("--trace-steps", type=int, default=960)
    sp.set_defaults(func=cmd_analyze_risk)

    sp = sub.add_parser("theory-check", help="exact checks on the tabular POMDP")
    sp.add_argument("--out", default="theory")
    sp.add_argument("--tau", type=float, default=0.45)
    sp.add_argument("--beta", type=float, default=0.95)
    sp.add_argument("--replicates", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_theory_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except C.ConfigError as e:
        print(json.dumps({"error": str(e), "unknown_keys": e.unknown}), file=sys.stderr)
        return 2
    except Exception as e:
        print(json.dumps({"error": f"{type(e).__name__}: {e}"}), file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
