"""End-to-end acceptance criteria, one test each.

Each test attaches a one-line summary that the terminal report prints next to
PASS or FAIL. Expensive training runs are shared through a session cache.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import pytest

from riskgate import config as C
from riskgate import core, experiment, theory
from riskgate.envs import tabular_pomdp_spec
from riskgate.metrics import mean_sd
from riskgate.risk import RiskModel
from reference_tables import GLUCOSE_ADOLESCENT, GLUCOSE_ADULT, NAV_CIRCLE, NAV_GOAL, nav_mismatches, recompute_ranks

SEEDS = (42, 123, 456)
TAU, BETA = 0.45, 0.95


class RunCache:
    """Trains each distinct configuration once per session."""

    def __init__(self, root: Path):
        self.root = root
        self.dirs: dict[str, Path] = {}

    def run(self, **settings) -> Path:
        cfg = C.resolve({k.replace("__", "."): str(v) for k, v in settings.items()})
        key = C.config_hash(cfg)
        if key not in self.dirs:
            self.dirs[key] = experiment.train(cfg, self.root / key[:12])
        return self.dirs[key]

    def metrics(self, **settings) -> dict:
        return json.loads((self.run(**settings) / "metrics.json").read_text())


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    return RunCache(tmp_path_factory.mktemp("acceptance_runs"))


@pytest.fixture(scope="module")
def report():
    return theory.theory_report(agreement_eps=0.05)


def _note(request, text: str) -> None:
    request.node.user_properties.append(("detail", text))


def _mean(runs, key, **settings) -> float:
    return float(np.mean([runs.metrics(experiment__seed=s, **settings)[key] for s in SEEDS]))


# 1 ------------------------------------------------------------------------------------

def test_c01_gate_algebra(request):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    bad = dict.fromkeys(("convexity", "limits", "monotone", "selection", "fallback"), 0)
    n = 10_000
    for _ in range(n):
        M, A = int(rng.integers(1, 9)), int(rng.integers(1, 7))
        q = rng.normal(0, 10, (M, A))
        if rng.random() < 0.3:
            q = np.round(q)  # ties
        rho = rng.uniform(0, 1, A)
        r_max = float(rng.uniform(0, 1))
        qp, qm, qg = core.gate_values(q, rho)
        bad["convexity"] += not np.all((qm <= qg) & (qg <= qp))
        bad["limits"] += not (np.array_equal(core.gate_values(q, np.zeros(A))[2], qp)
                              and np.array_equal(core.gate_values(q, np.ones(A))[2], qm))
        rho2 = np.minimum(1.0, rho + rng.uniform(0, 1, A))
        bad["monotone"] += not np.all(core.gate_values(q, rho2)[2] <= qg)
        a, fb = core.select_action(qg, rho, r_max)
        safe = rho <= r_max
        if safe.any():
            bad["selection"] += not (safe[a] and not fb and qg[a] == qg[safe].max()
                                     and a == np.flatnonzero(safe & (qg == qg[safe].max()))[0])
        rho_unsafe = rng.uniform(r_max + 1e-9, 1 + 1e-9, A) if r_max < 1 else np.full(A, 1.5)
        a2, fb2 = core.select_action(qg, rho_unsafe, r_max)
        bad["fallback"] += not (fb2 and 0 <= a2 < A and a2 == int(np.argmin(rho_unsafe)))
    elapsed = time.perf_counter() - t0
    _note(request, f"{n} cases per property, violations {bad}, {elapsed:.1f}s")
    assert sum(bad.values()) == 0 and elapsed < 5.0


# 2 ------------------------------------------------------------------------------------

def test_c02_tabular_oracle_equivalence(request):
    t0 = time.perf_counter()
    spec = tabular_pomdp_spec()
    proxy, Q_learned = theory.learn_tabular_q(spec, W=2, beta=BETA, r_max=1.0)
    Q_vi = theory.value_iteration(proxy.model, BETA, tau=1.0, lam=0.0)
    gap = float(np.max(np.abs(Q_learned - Q_vi)))
    elapsed = time.perf_counter() - t0
    _note(request, f"sup-norm gap {gap:.2e} over {proxy.model.n} windows, {elapsed:.1f}s")
    assert gap < 1e-6 and elapsed < 30.0


# 3 ------------------------------------------------------------------------------------

def test_c03_contraction(request, report):
    o, p = report["contraction_oracle"], report["contraction_proxy"]
    _note(request, f"max ratio oracle {o['max_ratio']:.3f}, proxy {p['max_ratio']:.3f}, beta {BETA}")
    assert o["ok"] and p["ok"]


# 4 ------------------------------------------------------------------------------------

def test_c04_envelope(request):
    t0 = time.perf_counter()
    rows = theory.check_envelope(lambda rng, shape: rng.uniform(-1.0, 2.0, shape), (1, 2, 3, 5, 8),
                                 trials=10_000, p_pos=2 / 3, p_neg=1 / 3, seed=7)
    elapsed = time.perf_counter() - t0
    _note(request, ", ".join(f"M={r['M']}: {r['rate']:.4f}<={r['bound']:.4f}" for r in rows) + f", {elapsed:.1f}s")
    assert all(r["ok"] for r in rows) and elapsed < 20.0


# 5 ------------------------------------------------------------------------------------

def test_c05_agreement_intervention(request):
    t0 = time.perf_counter()
    spec = tabular_pomdp_spec()
    res = [theory.check_agreement(spec, 2, TAU, BETA, 0.05, mode, seed=s)
           for mode in ("uniform", "adversarial") for s in range(5)]
    elapsed = time.perf_counter() - t0
    viol = sum(r["agreement_violations"] + r["intervention_violations"] for r in res)
    _note(request, f"{len(res)} injections, {res[0]['states']} states each, "
                   f"{res[0]['intervention_states']} intervention states, violations {viol}, {elapsed:.1f}s")
    assert viol == 0 and all(r["intervention_states"] > 0 for r in res) and elapsed < 30.0


# 6 ------------------------------------------------------------------------------------

def test_c06_error_bound_trend(request, report):
    w = ", ".join(f"W={r['W']}: {r['error']:.3g}<={r['bound']:.3g}" for r in report["window_trend"])
    n = ", ".join(f"n={r['n']}: {r['error']:.3g}" for r in report["sample_trend"])
    _note(request, f"{w}; {n}")
    assert report["error_nonincreasing_in_W"]
    assert report["error_decreasing_in_n"]
    assert report["error_within_bound"]


# 7 ------------------------------------------------------------------------------------

def test_c07_risk_calibration_synthetic(request):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    p = np.array([0.1, 0.5, 0.9])
    cells = rng.integers(0, 3, 10_000)
    x = np.eye(3)[cells]
    y = (rng.random(10_000) < p[cells]).astype(float)
    a = np.zeros(10_000, dtype=int)
    model = RiskModel(3, 1, hidden_dim=8, learning_rate=0.5, seed=0)
    for _ in range(20):
        for idx in np.array_split(rng.permutation(10_000), 10_000 // 64):
            model.update(x[idx], a[idx], y[idx])
    pred = model.predict(np.eye(3), np.zeros(3, dtype=int))
    mae = np.abs(pred - p)

    fd = RiskModel(3, 2, hidden_dim=5, seed=3)
    for k in fd.params:
        fd.params[k] = rng.normal(0, 0.5, fd.params[k].shape)
    xb, ab, yb = rng.normal(size=(7, 3)), rng.integers(0, 2, 7), rng.integers(0, 2, 7).astype(float)
    _, grads = fd.loss_and_grad(xb, ab, yb)
    flat = fd.get_flat()
    analytic = np.concatenate([grads[k].ravel() for k in fd.params])
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = 1e-6
        fd.set_flat(flat + e)
        up = fd.loss_and_grad(xb, ab, yb)[0]
        fd.set_flat(flat - e)
        numeric[i] = (up - fd.loss_and_grad(xb, ab, yb)[0]) / 2e-6
    rel = float(np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric))
    elapsed = time.perf_counter() - t0
    _note(request, f"cell MAE {np.round(mae, 4).tolist()}, grad rel err {rel:.1e}, {elapsed:.1f}s")
    assert np.all(mae < 0.05) and rel < 1e-4 and elapsed < 60.0


# 8 ------------------------------------------------------------------------------------

def test_c08_glucose_end_to_end(request, runs):
    t0 = time.perf_counter()
    rg_tir = _mean(runs, "tir_pct", experiment__env="glucose")
    uq_tir = _mean(runs, "tir_pct", experiment__env="glucose", experiment__algorithm="unconstrained_q")
    rg_low = _mean(runs, "time_below_70_pct", experiment__env="glucose")
    uq_low = _mean(runs, "time_below_70_pct", experiment__env="glucose", experiment__algorithm="unconstrained_q")
    elapsed = time.perf_counter() - t0
    _note(request, f"TIR {rg_tir:.1f} vs {uq_tir:.1f}, time<70 {rg_low:.2f} vs {uq_low:.2f}, {elapsed:.0f}s")
    assert rg_tir >= uq_tir and rg_low <= 0.5 * uq_low and elapsed < 600


# 9 ------------------------------------------------------------------------------------

def test_c09_navigation_end_to_end(request, runs):
    t0 = time.perf_counter()
    rg = [runs.metrics(experiment__env="navigation", experiment__seed=s) for s in SEEDS]
    uq = [runs.metrics(experiment__env="navigation", experiment__algorithm="unconstrained_q", experiment__seed=s)
          for s in SEEDS]

    def rpc(m):
        return np.inf if m["avg_cost"] == 0 else m["avg_reward"] / m["avg_cost"]

    rg_cost, uq_cost = np.mean([m["avg_cost"] for m in rg]), np.mean([m["avg_cost"] for m in uq])
    rg_rpc, uq_rpc = np.mean([rpc(m) for m in rg]), np.mean([rpc(m) for m in uq])
    elapsed = time.perf_counter() - t0
    _note(request, f"cost {rg_cost:.1f} vs {uq_cost:.1f}, R/C {rg_rpc:.3f} vs {uq_rpc:.3f}, {elapsed:.0f}s")
    assert rg_cost <= 0.5 * uq_cost and rg_rpc > uq_rpc and elapsed < 600


# 10 -----------------------------------------------------------------------------------

def test_c10_glucose_risk_calibration(request, runs):
    run = runs.run(experiment__env="glucose", experiment__seed=42)
    t0 = time.perf_counter()
    cal = experiment.analyze_risk(run)
    elapsed = time.perf_counter() - t0
    _note(request, f"threshold agreement {cal['threshold_agreement_pct']:.2f}% over {cal['steps']} steps, "
                   f"MAE {cal['mae']:.3f}, {elapsed:.1f}s")
    assert cal["threshold_agreement_pct"] >= 90.0 and elapsed < 120


# 11 -----------------------------------------------------------------------------------

def test_c11_ablation_trends(request, runs):
    t0 = time.perf_counter()
    low = {}
    for r_max in (0.5, 0.25, 0.1):
        low[r_max] = mean_sd([runs.metrics(experiment__env="glucose", gate__r_max=r_max, experiment__seed=s)
                              ["time_below_70_pct"] for s in SEEDS])
    trend_ok = all(low[b][0] <= low[a][0] + max(low[a][1], low[b][1]) for a, b in ((0.5, 0.25), (0.25, 0.1)))
    cost = {lam: mean_sd([runs.metrics(experiment__env="navigation", gate__lambda_risk=lam, experiment__seed=s)
                          ["avg_cost"] for s in SEEDS]) for lam in (0.0, 0.1)}
    elapsed = time.perf_counter() - t0
    _note(request, "time<70 by r_max " + ", ".join(f"{k}: {m:.2f}±{s:.2f}" for k, (m, s) in low.items())
          + f"; nav cost lambda 0.1 {cost[0.1][0]:.1f} vs 0 {cost[0.0][0]:.1f}, {elapsed:.0f}s")
    assert trend_ok and cost[0.1][0] < cost[0.0][0] and elapsed < 1800


# 12 -----------------------------------------------------------------------------------

def test_c12_metrics_regression(request):
    t0 = time.perf_counter()
    rank_bad = [(name, round(recompute_ranks(t)[name], 2), row[3])
                for t in (GLUCOSE_ADULT, GLUCOSE_ADOLESCENT) for name, row in t.items()
                if round(recompute_ranks(t)[name], 2) != row[3]]
    nav_bad = nav_mismatches(NAV_GOAL) + nav_mismatches(NAV_CIRCLE)
    elapsed = time.perf_counter() - t0
    _note(request, f"rank mismatches {len(rank_bad)}, normalized-column mismatches {len(nav_bad)} "
                   f"{[(n, c, got, want) for n, c, got, want in nav_bad]}, {elapsed:.2f}s")
    assert not rank_bad and not nav_bad and elapsed < 1.0


# 13 -----------------------------------------------------------------------------------

def test_c13_determinism(request, runs, tmp_path):
    first = runs.run(experiment__env="glucose", experiment__seed=42)
    replay = experiment.train(C.load_config(first / "manifest.json"), tmp_path / "replay")
    same = (first / "metrics.json").read_bytes() == (replay / "metrics.json").read_bytes()
    _note(request, f"metrics.json byte-identical on replay: {same}")
    assert same


# 14 -----------------------------------------------------------------------------------

def test_c14_decision_latency(request):
    from riskgate.agent import run_episode

    cfg = C.resolve({"experiment.env": "glucose", "agent.warmup_steps": "0"})
    env = experiment.build_env(cfg)
    agent = experiment.build_agent(cfg, env)
    run_episode(env, agent, 1000, observation=env.reset(), learn=False)
    ms = 1000 * np.asarray(agent.latencies)
    _note(request, f"mean {ms.mean():.3f} ms, p99 {np.percentile(ms, 99):.3f} ms over {ms.size} decisions")
    assert ms.mean() < 5.0
