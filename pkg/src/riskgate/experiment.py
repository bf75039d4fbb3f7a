"""Run orchestration: build an environment and agent from a resolved config,
train and evaluate, and lay the results out in a run directory::

    run_dir/
        manifest.json      resolved config, seed, config hash, timestamps, paths
        config.txt         the same config in the flat text format
        metrics.json       deterministic evaluation metrics
        timing.json        wall-clock runtime and decision latency
        episodes/*.csv     per-step logs
        checkpoints/*      risk model and critic ensemble

Everything in metrics.json is a function of the config alone, so replaying a
manifest reproduces it byte for byte. Wall-clock numbers live in timing.json.
"""

from __future__ import annotations

import csv
import itertools
import json
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import config as C
from . import metrics as M
from . import theory
from .agent import RiskGatedAgent, glucose_shield, glucose_teacher, run_episode
from .core import GlucoseFeatures, NavigationFeatures
from .envs import GlucoseEnv, NavigationEnv, TabularPOMDPEnv
from .episode import EpisodeLog
from .risk import label_transitions

GLUCOSE_OFFSET = (140.0, 0.0, 0.0, 0.0)
GLUCOSE_SCALE = (50.0, 2.0, 2.0, 2.0)


# -- construction -------------------------------------------------------------

def build_env(cfg: dict):
    env, seed = cfg["experiment.env"], int(cfg["experiment.seed"])
    if env == "glucose":
        ecfg = C.build_env_config(cfg)
        days = int(cfg["experiment.train_days"]) + int(cfg["experiment.eval_days"])
        if ecfg.episode_days < days:
            ecfg = replace(ecfg, episode_days=days)
        return GlucoseEnv(ecfg, seed=seed)
    if env == "navigation":
        return NavigationEnv(C.build_env_config(cfg), seed=seed)
    return TabularPOMDPEnv(seed=seed, episode_len=int(cfg["experiment.episode_len"]))


def build_agent(cfg: dict, env) -> RiskGatedAgent:
    acfg = C.build_agent_config(cfg)
    W = acfg.gate.window_len
    if cfg["experiment.env"] == "glucose":
        grid = env.config.action_grid
        recipe = GlucoseFeatures(decay=float(cfg["features.iob_decay"]),
                                 dt_min=env.config.decision_interval, action_values=grid)
        tcfg = C.TeacherConfig(**C._section(cfg, "teacher"))
        scfg = C.ShieldConfig(**C._section(cfg, "shield"))
        return RiskGatedAgent(acfg, env.n_actions, recipe, recipe.dim(W),
                              feature_offset=GLUCOSE_OFFSET, feature_scale=GLUCOSE_SCALE,
                              teacher=glucose_teacher(grid, tcfg), shield=glucose_shield(scfg))
    recipe = NavigationFeatures(env.obs_dim, env.n_actions)
    return RiskGatedAgent(acfg, env.n_actions, recipe, recipe.dim(W))


# -- schedules ------------------------------------------------------------------

def _episode_seed(cfg: dict, phase: str, k: int) -> int:
    return int(cfg["experiment.seed"]) * 1000 + (500 if phase == "eval" else 0) + k


def run_schedule(cfg: dict, env, agent) -> tuple[list, list]:
    """Train then evaluate. Returns (train logs, eval logs)."""
    learn_eval = bool(cfg["experiment.learn_during_eval"])
    if cfg["experiment.env"] == "glucose":
        per_day = env.config.steps_per_day
        train = run_episode(env, agent, per_day * int(cfg["experiment.train_days"]), observation=env.reset())
        evaluation = run_episode(env, agent, per_day * int(cfg["experiment.eval_days"]), start=False,
                                 learn=learn_eval, t0=len(train))
        agent.end_episode()
        return [train], [evaluation]
    n = int(cfg["experiment.episode_len"])
    train, evaluation = [], []
    for k in range(int(cfg["experiment.train_episodes"])):
        train.append(run_episode(env, agent, n, observation=env.reset(_episode_seed(cfg, "train", k))))
        agent.end_episode()
    for k in range(int(cfg["experiment.eval_episodes"])):
        evaluation.append(run_episode(env, agent, n, observation=env.reset(_episode_seed(cfg, "eval", k)),
                                      learn=learn_eval))
        agent.end_episode()
    return train, evaluation


def summarize(cfg: dict, logs: list) -> dict:
    """Deterministic evaluation metrics for one run."""
    env = cfg["experiment.env"]
    out = {"steps": int(sum(len(l) for l in logs)),
           "fallback_rate": float(np.mean(np.concatenate([l.column("fallback") for l in logs]))),
           "shield_rate": float(np.mean(np.concatenate([l.column("shield") for l in logs])))}
    if env == "glucose":
        g = np.concatenate([l.latent("glucose") for l in logs])
        m = M.glucose_metrics(g, g_low=cfg["glucose.g_low"], g_high=cfg["glucose.g_high"])
        out.update({k: v for k, v in m.to_dict().items() if k not in ("runtime_s", "per_step_latency_ms")})
        return out
    rewards = [l.total_reward for l in logs]
    costs = [l.total_cost for l in logs]
    ref = float(cfg["experiment.reference_reward"])
    if ref > 0:
        out.update(M.nav_metrics(rewards, costs, ref).to_dict())
    else:
        avg_r, avg_c = float(np.mean(rewards)), float(np.mean(costs))
        out.update(avg_reward=avg_r, avg_cost=avg_c, j_r=None, j_c=avg_c / M.COST_LIMIT_REFERENCE,
                   reward_per_cost=None if avg_c == 0 else avg_r / avg_c, reward_per_cost_infinite=avg_c == 0)
    out["episode_rewards"] = [float(r) for r in rewards]
    out["episode_costs"] = [float(c) for c in costs]
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _save_logs(run_dir: Path, phase: str, logs: list) -> list[str]:
    ep_dir = run_dir / "episodes"
    ep_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, log in enumerate(logs):
        name = f"{phase}.csv" if len(logs) == 1 else f"{phase}_{k:03d}.csv"
        log.to_csv(ep_dir / name)
        paths.append(f"episodes/{name}")
    return paths


# -- commands ---------------------------------------------------------------------

def train(cfg: dict, run_dir) -> Path:
    """Train and evaluate one configuration, writing a complete run directory."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    env = build_env(cfg)
    agent = build_agent(cfg, env)
    train_logs, eval_logs = run_schedule(cfg, env, agent)
    runtime = time.perf_counter() - t0

    paths = _save_logs(run_dir, "train", train_logs) + _save_logs(run_dir, "eval", eval_logs)
    ck = run_dir / "checkpoints"
    ck.mkdir(exist_ok=True)
    agent.critics.save(ck / "critics.ckpt")
    if hasattr(agent.risk, "save"):
        agent.risk.save(ck / "risk.ckpt")
    if cfg["experiment.save_replay"]:
        agent.replay.to_csv(ck / "replay.csv")

    _write_json(run_dir / "metrics.json", summarize(cfg, eval_logs))
    _write_json(run_dir / "timing.json", {
        "runtime_s": runtime,
        "per_step_latency_ms": 1000.0 * float(np.mean(agent.latencies)) if agent.latencies else None,
        "decisions": len(agent.latencies),
    })
    (run_dir / "config.txt").write_text(C.dump_config_text(cfg))
    _write_json(run_dir / "manifest.json", {
        "config": C.to_jsonable(cfg),
        "config_hash": C.config_hash(cfg),
        "seeds": [int(cfg["experiment.seed"])],
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "outputs": sorted(paths + ["metrics.json", "timing.json", "checkpoints/critics.ckpt"]),
    })
    return run_dir


def load_run_config(run_dir) -> dict:
    return C.load_config(Path(run_dir) / "manifest.json")


def evaluate(run_dir, episodes: int | None = None) -> dict:
    """Re-evaluate saved models with learning frozen; writes eval_metrics.json."""
    from .critics import CriticEnsemble
    from .risk import RiskModel

    run_dir = Path(run_dir)
    cfg = load_run_config(run_dir)
    env = build_env(cfg)
    agent = build_agent(cfg, env)
    agent.critics = CriticEnsemble.load(run_dir / "checkpoints" / "critics.ckpt")
    if (run_dir / "checkpoints" / "risk.ckpt").exists():
        agent.risk = RiskModel.load(run_dir / "checkpoints" / "risk.ckpt")
    logs = []
    if cfg["experiment.env"] == "glucose":
        days = int(cfg["experiment.eval_days"]) if episodes is None else episodes
        agent.total_steps = agent.cfg.warmup_steps
        logs.append(run_episode(env, agent, env.config.steps_per_day * days, observation=env.reset(), learn=False))
    else:
        n = int(cfg["experiment.eval_episodes"]) if episodes is None else episodes
        for k in range(n):
            logs.append(run_episode(env, agent, int(cfg["experiment.episode_len"]),
                                    observation=env.reset(_episode_seed(cfg, "eval", k)), learn=False))
    out = summarize(cfg, logs)
    _write_json(run_dir / "eval_metrics.json", out)
    return out


def analyze_risk(run_dir, trace_steps: int = 960) -> dict:
    """Compare logged predicted risk against realized hazard labels on the eval logs.

    The post-hoc risk of a step is its realized label: whether a violation
    occurred within the agent's risk horizon after it. Writes
    risk_calibration.json and a trace CSV of the final ``trace_steps`` steps.
    """
    run_dir = Path(run_dir)
    cfg = load_run_config(run_dir)
    files = sorted((run_dir / "episodes").glob("eval*.csv"))
    if not files:
        raise FileNotFoundError(f"no evaluation logs under {run_dir / 'episodes'}")
    pred, post = [], []
    for f in files:
        log = EpisodeLog.from_csv(f)
        labels = label_transitions(log, int(cfg["agent.risk_horizon"]))
        pred.append(log.column("predicted_risk")[: len(labels)])
        post.append(np.array([float(l.violated) for l in labels]))
    pred, post = np.concatenate(pred), np.concatenate(post)
    if np.isnan(pred).any():
        raise ValueError("evaluation logs have no predicted risks")
    report = M.risk_calibration(pred, post, float(cfg["gate.r_max"])).to_dict()
    report["steps"] = int(pred.size)
    _write_json(run_dir / "risk_calibration.json", report)
    with open(run_dir / "risk_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "predicted_risk", "posthoc_risk"])
        start = max(0, pred.size - trace_steps)
        for k in range(start, pred.size):
            w.writerow([k, repr(float(pred[k])), repr(float(post[k]))])
    return report


def _train_cell(args) -> dict:
    cfg, run_dir = args
    try:
        train(cfg, run_dir)
        return {"run_dir": str(run_dir), "ok": True,
                "metrics": json.loads((Path(run_dir) / "metrics.json").read_text())}
    except Exception as e:  # recorded per cell; the sweep continues
        return {"run_dir": str(run_dir), "ok": False, "error": f"{type(e).__name__}: {e}",
                "traceback": traceback.format_exc()}


SCALAR_METRICS = {
    "glucose": ("tir_pct", "time_below_70_pct", "time_above_180_pct", "mean_bg"),
    "navigation": ("avg_reward", "avg_cost", "j_c", "reward_per_cost"),
    "tabular": ("avg_reward", "avg_cost", "j_c", "reward_per_cost"),
}


def sweep(base_cfg: dict, grid: dict, seeds, out_dir, workers: int = 1) -> list[dict]:
    """Run every grid cell for every seed, then write runs.csv and aggregate.csv.

    Args:
        base_cfg: resolved config that grid values are layered over.
        grid: dotted key -> list of values.
        seeds: experiment seeds per cell.
        workers: parallel processes; 1 runs in-process.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    keys = list(grid)
    cells = list(itertools.product(*(grid[k] for k in keys))) if keys else [()]
    jobs, index = [], []
    raw_base = C.explicit_settings(base_cfg)
    for ci, values in enumerate(cells):
        for seed in seeds:
            raw = dict(raw_base)
            raw.update({k: (str(v) if not isinstance(v, str) else v) for k, v in zip(keys, values)})
            raw["experiment.seed"] = int(seed)
            cfg = C.resolve(raw)
            name = "_".join(f"{k.split('.')[-1]}={v}" for k, v in zip(keys, values)) or "base"
            jobs.append((cfg, out_dir / f"cell{ci:03d}_{name}" / f"seed{seed}"))
            index.append((ci, values, int(seed)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_cell, jobs))
    else:
        results = [_train_cell(j) for j in jobs]

    env = base_cfg["experiment.env"]
    names = SCALAR_METRICS[env]
    with open(out_dir / "runs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys + ["seed", "ok", "run_dir"] + list(names) + ["error"])
        for (ci, values, seed), res in zip(index, results):
            m = res.get("metrics", {})
            w.writerow(list(values) + [seed, int(res["ok"]), res["run_dir"]]
                       + [repr(_num(m.get(n))) for n in names] + [res.get("error", "")])
    rows = []
    for ci, values in enumerate(cells):
        ok = [r for (c, _, _), r in zip(index, results) if c == ci and r["ok"]]
        row = {k: v for k, v in zip(keys, values)}
        row.update(cell=ci, n_ok=len(ok), n_failed=len(seeds) - len(ok))
        for n in names:
            vals = [_num(r["metrics"].get(n)) for r in ok]
            mean, sd = M.mean_sd(vals) if vals else (float("nan"), float("nan"))
            row[f"{n}_mean"], row[f"{n}_sd"] = mean, sd
        rows.append(row)
    with open(out_dir / "aggregate.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    _write_json(out_dir / "sweep.json", {"grid": {k: list(v) for k, v in grid.items()}, "seeds": list(seeds),
                                         "results": [{k: v for k, v in r.items() if k != "traceback"}
                                                     for r in results]})
    return rows


def _num(v) -> float:
    if v is None:
        return float("nan")
    return float(v)


def compare(base_cfg: dict, algorithms, seeds, out_dir, workers: int = 1) -> list[dict]:
    """Table-style comparison of algorithms; writes compare.csv.

    Navigation rows are normalised by the unconstrained baseline's mean
    reward (or the first algorithm's when that baseline is absent).
    Glucose rows get a mean-rank column over TIR and the two tails.
    """
    out_dir = Path(out_dir)
    rows = sweep(base_cfg, {"experiment.algorithm": list(algorithms)}, seeds, out_dir, workers)
    env = base_cfg["experiment.env"]
    table = []
    if env == "glucose":
        ranks = M.glucose_mean_rank({r["experiment.algorithm"]: (r["tir_pct_mean"], r["time_below_70_pct_mean"],
                                                                 r["time_above_180_pct_mean"]) for r in rows})
        for r in rows:
            a = r["experiment.algorithm"]
            table.append({"algorithm": a, "n_seeds": r["n_ok"],
                          **{f"{n}": f"{r[n + '_mean']:.1f} ± {r[n + '_sd']:.1f}" for n in SCALAR_METRICS[env]},
                          "mean_rank": f"{ranks[a]:.2f}"})
    else:
        by_algo = {r["experiment.algorithm"]: r for r in rows}
        ref_algo = "unconstrained_q" if "unconstrained_q" in by_algo else rows[0]["experiment.algorithm"]
        ref = by_algo[ref_algo]["avg_reward_mean"]
        for r in rows:
            a = r["experiment.algorithm"]
            jr = r["avg_reward_mean"] / ref if ref > 0 else float("nan")
            table.append({"algorithm": a, "n_seeds": r["n_ok"],
                          "avg_reward": f"{r['avg_reward_mean']:.2f} ± {r['avg_reward_sd']:.2f}",
                          "avg_cost": f"{r['avg_cost_mean']:.2f} ± {r['avg_cost_sd']:.2f}",
                          "j_r": f"{jr:.3f}", "j_c": f"{r['avg_cost_mean'] / M.COST_LIMIT_REFERENCE:.3f}",
                          "reward_per_cost": f"{r['avg_reward_mean'] / r['avg_cost_mean']:.3f}"
                          if r["avg_cost_mean"] > 0 else "inf"})
    with open(out_dir / "compare.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(table[0]))
        w.writeheader()
        w.writerows(table)
    return rows


def theory_check(out_dir, **kwargs) -> dict:
    """Write theory_report.json plus CSVs of the window and sample-size trends."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = theory.theory_report(**kwargs)
    report["envelope"] = theory.check_envelope(lambda rng, shape: rng.uniform(-1.0, 2.0, shape),
                                               (1, 2, 3, 5, 8), trials=10_000, p_pos=2 / 3, p_neg=1 / 3)
    report["passed"] = bool(
        report["error_nonincreasing_in_W"] and report["error_decreasing_in_n"] and report["error_within_bound"]
        and report["contraction_oracle"]["ok"] and report["contraction_proxy"]["ok"]
        and all(a["ok"] for a in report["agreement"]) and all(e["ok"] for e in report["envelope"])
    )
    _write_json(out_dir / "theory_report.json", report)
    with open(out_dir / "window_trend.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["W", "error", "tv", "eps", "bound"])
        for r in report["window_trend"]:
            w.writerow([r["W"], r["error"], r["tv"], r["eps"], r["bound"]])
    with open(out_dir / "sample_trend.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "mean_error", "max_error", "min_bound"])
        for r in report["sample_trend"]:
            w.writerow([r["n"], r["error"], r["max_error"], r["bound_min"]])
    return report
