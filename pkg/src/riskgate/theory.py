"""Exact checks of the proxy-state approximation on a tabular POMDP.

Two finite MDPs are built from a ``TabularPOMDPSpec``:

* the belief MDP, reached by breadth-first search from b0 and from every
  window belief, solved with a safe-restricted Bellman operator using the
  true risk; and
* the proxy MDP whose states are windows of the last W (action, observation)
  pairs, with window beliefs obtained by filtering a fixed prior.

Both are solved by value iteration with the same gate: maximise over the
actions whose risk is at most tau, else take the minimum-risk action.
Comparing the two fixed points on every positive-probability history
window gives the measured error that the bound is checked against.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .envs.tabular import TabularPOMDPSpec, tabular_pomdp_spec

VI_TOL = 1e-10
_ROUND = 12


@dataclass
class FiniteModel:
    """A finite MDP over abstract indices, in the shape value iteration wants.

    Attributes:
        P: (N, A, Y) probability of each observation after (state, action).
        nxt: (N, A, Y) index of the successor state (0 where P is 0).
        reward: (N, A) expected immediate reward.
        risk: (N, A) risk used by the gate and the penalty.
    """

    P: np.ndarray
    nxt: np.ndarray
    reward: np.ndarray
    risk: np.ndarray

    @property
    def n(self) -> int:
        return self.reward.shape[0]


def gate_choice(Q: np.ndarray, risk: np.ndarray, tau: float) -> np.ndarray:
    """Greedy action per state over the safe set, min-risk if the set is empty."""
    safe = risk <= tau
    masked = np.where(safe, Q, -np.inf)
    return np.where(safe.any(axis=1), np.argmax(masked, axis=1), np.argmin(risk, axis=1))


def bellman(model: FiniteModel, Q: np.ndarray, beta: float, tau: float, lam: float = 0.0,
            gated: bool = True) -> np.ndarray:
    """One application of the gated operator with penalised reward r - lam (risk - tau).

    With ``gated=False`` the max runs over all actions.
    """
    choice = gate_choice(Q, model.risk, tau) if gated else np.argmax(Q, axis=1)
    V = Q[np.arange(model.n), choice]
    r = model.reward - lam * (model.risk - tau)
    return r + beta * np.sum(model.P * V[model.nxt], axis=2)


def value_iteration(model: FiniteModel, beta: float, tau: float, lam: float = 0.0,
                    Q0: np.ndarray | None = None, tol: float = VI_TOL, max_iter: int = 100_000,
                    gated: bool = True) -> np.ndarray:
    Q = np.zeros_like(model.reward) if Q0 is None else np.array(Q0, dtype=float)
    for _ in range(max_iter):
        Q_new = bellman(model, Q, beta, tau, lam, gated)
        if np.max(np.abs(Q_new - Q)) < tol:
            return Q_new
        Q = Q_new
    raise RuntimeError("value iteration did not converge")


# -- beliefs and windows ---------------------------------------------------------

def belief_update(spec: TabularPOMDPSpec, b: np.ndarray, a: int, y: int) -> tuple[np.ndarray, float]:
    """Posterior after taking ``a`` and observing ``y``, and the probability of ``y``."""
    joint = (b @ spec.T[:, a, :]) * spec.Omega[:, y]
    p = float(joint.sum())
    if p <= 0.0:
        return np.zeros_like(b), 0.0
    return joint / p, p


def window_prior(spec: TabularPOMDPSpec, tol: float = 1e-14) -> np.ndarray:
    """Stationary latent distribution under the uniformly random policy."""
    M = spec.T.mean(axis=1)
    mu = np.full(spec.n_states, 1.0 / spec.n_states)
    for _ in range(100_000):
        nxt = mu @ M
        if np.max(np.abs(nxt - mu)) < tol:
            return nxt
        mu = nxt
    return mu


def window_belief(spec: TabularPOMDPSpec, window, prior: np.ndarray) -> tuple[np.ndarray, float]:
    """Filter ``prior`` through a sequence of (action, observation) pairs."""
    b, prob = prior, 1.0
    for a, y in window:
        b, p = belief_update(spec, b, a, y)
        prob *= p
        if prob <= 0.0:
            return b, 0.0
    return b, prob


def enumerate_windows(spec: TabularPOMDPSpec, W: int, prior: np.ndarray) -> dict:
    """All positive-probability windows of W pairs, mapped to their beliefs."""
    pairs = list(itertools.product(range(spec.n_actions), range(spec.n_obs)))
    out = {}
    for window in itertools.product(pairs, repeat=W):
        b, prob = window_belief(spec, window, prior)
        if prob > 0.0:
            out[window] = b
    return out


def _key(b: np.ndarray) -> tuple:
    return tuple(np.round(b, _ROUND) + 0.0)


@dataclass
class BeliefMDP:
    model: FiniteModel
    beliefs: np.ndarray
    index: dict

    def lookup(self, b: np.ndarray) -> int:
        return self.index[_key(b)]


def build_belief_mdp(spec: TabularPOMDPSpec, seeds=()) -> BeliefMDP:
    """Breadth-first closure of the belief set from b0 and ``seeds``."""
    beliefs, index, frontier = [], {}, []

    def add(b):
        k = _key(b)
        if k not in index:
            index[k] = len(beliefs)
            beliefs.append(np.asarray(b, float))
            frontier.append(index[k])
        return index[k]

    add(spec.b0)
    for b in seeds:
        add(b)
    edges = {}
    while frontier:
        i = frontier.pop()
        for a in range(spec.n_actions):
            for y in range(spec.n_obs):
                b2, p = belief_update(spec, beliefs[i], a, y)
                if p > 0.0:
                    edges[i, a, y] = (p, add(b2))
    N, A, Y = len(beliefs), spec.n_actions, spec.n_obs
    P, nxt = np.zeros((N, A, Y)), np.zeros((N, A, Y), dtype=int)
    for (i, a, y), (p, j) in edges.items():
        P[i, a, y], nxt[i, a, y] = p, j
    B = np.array(beliefs)
    model = FiniteModel(P, nxt, B @ spec.R, np.array([spec.true_risk(b) for b in B]))
    return BeliefMDP(model, B, index)


@dataclass
class ProxyMDP:
    model: FiniteModel
    windows: list
    index: dict
    beliefs: np.ndarray
    true_window_risk: np.ndarray


def build_proxy_mdp(spec: TabularPOMDPSpec, W: int, prior: np.ndarray | None = None,
                    risk_estimate: np.ndarray | None = None) -> ProxyMDP:
    """Window MDP. ``risk_estimate`` (n_windows, A) replaces the window risk if given."""
    prior = window_prior(spec) if prior is None else prior
    table = enumerate_windows(spec, W, prior)
    windows = list(table)
    index = {w: i for i, w in enumerate(windows)}
    N, A, Y = len(windows), spec.n_actions, spec.n_obs
    B = np.array([table[w] for w in windows])
    P, nxt = np.zeros((N, A, Y)), np.zeros((N, A, Y), dtype=int)
    for i, w in enumerate(windows):
        for a in range(A):
            pred = (B[i] @ spec.T[:, a, :]) @ spec.Omega
            for y in range(Y):
                if pred[y] > 0.0:
                    P[i, a, y] = pred[y]
                    nxt[i, a, y] = index[w[1:] + ((a, y),)]
    risk = np.array([spec.true_risk(b) for b in B])
    used = risk if risk_estimate is None else np.asarray(risk_estimate, float)
    if used.shape != risk.shape:
        raise ValueError(f"risk_estimate must have shape {risk.shape}")
    return ProxyMDP(FiniteModel(P, nxt, B @ spec.R, used), windows, index, B, risk)


# -- fixed points and comparison ----------------------------------------------------

def oracle_fixed_point(spec: TabularPOMDPSpec, tau: float, beta: float, lam: float = 0.0,
                       horizon: int = 3) -> tuple[BeliefMDP, np.ndarray]:
    """Belief-MDP Q with the gate on true risk. Seeds include every ``horizon``-window belief."""
    seeds = enumerate_windows(spec, horizon, window_prior(spec)).values()
    mdp = build_belief_mdp(spec, seeds)
    return mdp, value_iteration(mdp.model, beta, tau, lam)


def proxy_fixed_point(spec: TabularPOMDPSpec, W: int, tau: float, beta: float, lam: float = 0.0,
                      risk_estimate: np.ndarray | None = None) -> tuple[ProxyMDP, np.ndarray]:
    proxy = build_proxy_mdp(spec, W, risk_estimate=risk_estimate)
    return proxy, value_iteration(proxy.model, beta, tau, lam)


@dataclass
class Comparison:
    error: float
    tv: float
    eps: float


def compare(spec, oracle: BeliefMDP, Q_oracle, proxy: ProxyMDP, Q_proxy, horizon: int = 3) -> Comparison:
    """Sup-norm gap, belief TV, and risk error over positive-probability histories.

    Histories are windows of ``horizon`` pairs, whose filtered belief is exact
    for this model. Each is matched to the proxy state made of its last W pairs.
    """
    W = len(proxy.windows[0])
    err = tv = eps = 0.0
    for h, b in enumerate_windows(spec, horizon, window_prior(spec)).items():
        i = oracle.lookup(b)
        j = proxy.index[h[-W:]]
        err = max(err, float(np.max(np.abs(Q_oracle[i] - Q_proxy[j]))))
        tv = max(tv, 0.5 * float(np.abs(b - proxy.beliefs[j]).sum()))
        eps = max(eps, float(np.max(np.abs(proxy.model.risk[j] - oracle.model.risk[i]))))
    return Comparison(err, tv, eps)


def dual_value(oracle: BeliefMDP, beta: float, tau: float, lam: float, start: int = 0) -> float:
    """max over policies of E sum beta^t [r - lam (risk - tau)] from belief ``start``."""
    Q = value_iteration(oracle.model, beta, tau, lam, gated=False)
    return float(Q[start].max())


def optimal_multiplier(oracle: BeliefMDP, beta: float, tau: float, grid=None) -> tuple[float, np.ndarray]:
    """Grid minimiser of the dual function; returns (lambda*, dual values on the grid)."""
    grid = np.linspace(0.0, 5.0, 101) if grid is None else np.asarray(grid, float)
    vals = np.array([dual_value(oracle, beta, tau, lam) for lam in grid])
    return float(grid[int(np.argmin(vals))]), vals


def penalised_span(model: FiniteModel, tau: float, lam: float) -> float:
    r = model.reward - lam * (model.risk - tau)
    return float(r.max() - r.min())


def fit_envelope(tvs: dict, gamma: float = 0.5) -> float:
    """Smallest C with TV_W <= C gamma^W for every measured W."""
    return max(tv / gamma**W for W, tv in tvs.items())


def error_bound(span: float, C: float, gamma: float, W: int, beta: float,
                lam: float, lam_star: float, eps: float) -> dict:
    trunc = span * C * gamma**W / (1 - beta) ** 2
    dual = abs(lam - lam_star) / (1 - beta)
    risk = lam_star * eps / (1 - beta)
    return {"truncation": trunc, "dual": dual, "risk": risk, "total": trunc + dual + risk}


def empirical_risk(true_risk: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Per-cell frequency of n Bernoulli(true_risk) draws."""
    return rng.binomial(n, np.clip(true_risk, 0.0, 1.0)) / n


# -- operator properties -------------------------------------------------------------

def check_contraction(model: FiniteModel, beta: float, tau: float, lam: float = 0.0,
                      n_pairs: int = 100, seed: int = 0, scale: float = 10.0) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_pairs):
        Q1 = rng.uniform(-scale, scale, model.reward.shape)
        Q2 = rng.uniform(-scale, scale, model.reward.shape)
        gap = np.max(np.abs(bellman(model, Q1, beta, tau, lam) - bellman(model, Q2, beta, tau, lam)))
        worst = max(worst, float(gap / np.max(np.abs(Q1 - Q2))))
    return {"max_ratio": worst, "beta": beta, "ok": worst <= beta + 1e-12}


def check_uniqueness(model: FiniteModel, beta: float, tau: float, lam: float = 0.0, seed: int = 0) -> float:
    """Sup gap between fixed points reached from two random starts."""
    rng = np.random.default_rng(seed)
    Qa = value_iteration(model, beta, tau, lam, Q0=rng.uniform(-50, 50, model.reward.shape))
    Qb = value_iteration(model, beta, tau, lam, Q0=rng.uniform(-50, 50, model.reward.shape))
    return float(np.max(np.abs(Qa - Qb)))


def check_envelope(sampler, M_values, trials: int = 20_000, p_pos: float | None = None,
                   p_neg: float | None = None, seed: int = 0) -> list[dict]:
    """Rate at which M i.i.d. errors fail to straddle zero, against p+^M + p-^M.

    Args:
        sampler: ``sampler(rng, shape)`` returning error draws.
        M_values: ensemble sizes to test.
        p_pos, p_neg: P(error > 0) and P(error < 0); estimated if omitted.
    """
    rng = np.random.default_rng(seed)
    if p_pos is None or p_neg is None:
        probe = sampler(rng, (200_000,))
        p_pos, p_neg = float(np.mean(probe > 0)), float(np.mean(probe < 0))
    rows = []
    for M in M_values:
        e = sampler(rng, (trials, M))
        miss = (e.min(axis=1) > 0) | (e.max(axis=1) < 0)
        rate = float(miss.mean())
        bound = p_pos**M + p_neg**M
        slack = 3.0 * np.sqrt(max(bound * (1 - bound), 1e-12) / trials)
        rows.append({"M": int(M), "rate": rate, "bound": bound, "ok": bool(rate <= bound + slack)})
    return rows


def inject_risk_error(true_risk: np.ndarray, eps: float, tau: float, mode: str, rng) -> np.ndarray:
    """Estimated risk with |error| <= eps; "adversarial" pushes every cell towards tau."""
    if mode == "uniform":
        noise = rng.uniform(-eps, eps, true_risk.shape)
    elif mode == "adversarial":
        noise = eps * np.sign(tau - true_risk)
    else:
        raise ValueError(f"unknown injection mode {mode!r}")
    return np.clip(true_risk + noise, 0.0, 1.0)


def check_agreement(spec: TabularPOMDPSpec, W: int, tau: float, beta: float, eps: float,
                    mode: str = "uniform", lam: float = 0.0, seed: int = 0) -> dict:
    """Agreement and intervention clauses on every proxy state.

    The unconstrained policy takes the argmax of the gated fixed point over
    all actions; the gated policy restricts the same Q to the estimated safe
    set. Where that argmax is estimated safe with margin eps the two must
    agree; where its true risk exceeds tau + eps the gate must switch to an
    action of true risk at most tau + eps.
    """
    rng = np.random.default_rng(seed)
    base = build_proxy_mdp(spec, W)
    rho_hat = inject_risk_error(base.true_window_risk, eps, tau, mode, rng)
    proxy, Q = proxy_fixed_point(spec, W, tau, beta, lam, risk_estimate=rho_hat)
    rows = np.arange(proxy.model.n)
    unc = np.argmax(Q, axis=1)
    gated = gate_choice(Q, rho_hat, tau)
    rho = proxy.true_window_risk
    agree_zone = tau - rho_hat[rows, unc] > eps
    interv_zone = rho[rows, unc] > tau + eps
    agree_bad = int(np.sum(agree_zone & (gated != unc)))
    interv_bad = int(np.sum(interv_zone & ((gated == unc) | (rho[rows, gated] > tau + eps))))
    return {
        "mode": mode, "eps": eps, "states": int(proxy.model.n),
        "agreement_states": int(agree_zone.sum()), "agreement_violations": agree_bad,
        "intervention_states": int(interv_zone.sum()), "intervention_violations": interv_bad,
        "ok": agree_bad == 0 and interv_bad == 0,
    }


# -- full report ----------------------------------------------------------------

def theory_report(spec: TabularPOMDPSpec | None = None, tau: float = 0.45, beta: float = 0.95,
                  windows=(1, 2, 3), ns=(100, 1_000, 10_000), n_window: int = 2, replicates: int = 20,
                  gamma: float = 0.5, seed: int = 0, agreement_eps: float = 0.1) -> dict:
    """Run every check and return a JSON-serialisable summary."""
    spec = spec or tabular_pomdp_spec()
    horizon = max(max(windows), n_window)
    oracle0, _ = oracle_fixed_point(spec, tau, beta, 0.0, horizon)
    lam_star, _ = optimal_multiplier(oracle0, beta, tau)
    oracle, Q_star = oracle_fixed_point(spec, tau, beta, lam_star, horizon)
    span = penalised_span(oracle.model, tau, lam_star)

    by_window = {}
    for W in windows:
        proxy, Q = proxy_fixed_point(spec, W, tau, beta, lam_star)
        by_window[W] = compare(spec, oracle, Q_star, proxy, Q, horizon)
    C = fit_envelope({W: c.tv for W, c in by_window.items()}, gamma)
    w_rows = []
    for W, c in by_window.items():
        bound = error_bound(span, C, gamma, W, beta, lam_star, lam_star, c.eps)
        w_rows.append({"W": W, "error": c.error, "tv": c.tv, "eps": c.eps, "bound": bound["total"],
                       "terms": bound})

    rng = np.random.default_rng(seed)
    base = build_proxy_mdp(spec, n_window)
    n_rows = []
    for n in ns:
        errs, bounds = [], []
        for _ in range(replicates):
            rho_hat = empirical_risk(base.true_window_risk, n, rng)
            proxy, Q = proxy_fixed_point(spec, n_window, tau, beta, lam_star, risk_estimate=rho_hat)
            c = compare(spec, oracle, Q_star, proxy, Q, horizon)
            errs.append(c.error)
            bounds.append(error_bound(span, C, gamma, n_window, beta, lam_star, lam_star, c.eps)["total"])
        n_rows.append({"n": int(n), "error": float(np.mean(errs)), "max_error": float(np.max(errs)),
                       "bound_min": float(np.min(bounds)),
                       "within_bound": bool(all(e <= b + 1e-9 for e, b in zip(errs, bounds)))})

    w_errors = [r["error"] for r in w_rows]
    n_errors = [r["error"] for r in n_rows]
    proxy2 = build_proxy_mdp(spec, n_window)
    return {
        "tau": tau, "beta": beta, "gamma": gamma, "C": C, "lambda_star": lam_star, "span": span,
        "window_trend": w_rows,
        "sample_trend": n_rows,
        "error_nonincreasing_in_W": bool(all(b <= a + 1e-9 for a, b in zip(w_errors, w_errors[1:]))),
        "error_decreasing_in_n": bool(all(b < a for a, b in zip(n_errors, n_errors[1:]))),
        "error_within_bound": bool(all(r["error"] <= r["bound"] + 1e-9 for r in w_rows)
                                   and all(r["within_bound"] for r in n_rows)),
        "contraction_oracle": check_contraction(oracle.model, beta, tau, lam_star, seed=seed),
        "contraction_proxy": check_contraction(proxy2.model, beta, tau, lam_star, seed=seed + 1),
        "uniqueness_gap": check_uniqueness(proxy2.model, beta, tau, lam_star, seed=seed),
        "agreement": [check_agreement(spec, n_window, tau, beta, agreement_eps, m, lam_star, seed)
                      for m in ("uniform", "adversarial")],
    }


# -- learned tabular critic ---------------------------------------------------------

def expected_transitions(proxy: ProxyMDP):
    """Every (window, action, observation) outcome as a weighted one-hot transition batch."""
    from .critics import TransitionBatch

    N, A, Y = proxy.model.P.shape
    idx = np.argwhere(proxy.model.P > 0.0)
    eye = np.eye(N)
    i, a, y = idx[:, 0], idx[:, 1], idx[:, 2]
    j = proxy.model.nxt[i, a, y]
    return TransitionBatch(
        features=eye[i], actions=a, shaped_rewards=proxy.model.reward[i, a], risks=np.zeros(len(i)),
        next_features=eye[j], next_risks=proxy.true_window_risk[j], terminals=np.zeros(len(i), bool),
        weights=proxy.model.P[i, a, y],
    )


def learn_tabular_q(spec: TabularPOMDPSpec, W: int, beta: float, r_max: float = 1.0,
                    tol: float = 1e-12, max_sweeps: int = 5_000) -> tuple[ProxyMDP, np.ndarray]:
    """Fit a single linear critic on one-hot window features by full-batch expected TD.

    With SGD at step size N*A/2 and targets synced every update, each update
    replaces every Q(w, a) by its expected TD target, i.e. one exact Bellman
    backup through the safe-restricted max.
    """
    from .critics import CriticEnsemble

    proxy = build_proxy_mdp(spec, W)
    N, A = proxy.model.reward.shape
    critic = CriticEnsemble(N, A, ensemble_size=1, hidden_dim=0, discount=beta, learning_rate=N * A / 2.0,
                            sync_interval=1, bootstrap_p=1.0, optimizer="sgd", init="zeros")
    batch = expected_transitions(proxy)
    eye = np.eye(N)
    Q = np.zeros((N, A))
    for _ in range(max_sweeps):
        critic.td_update(batch, r_max=r_max)
        Q_new = critic.q_values_batch(eye, proxy.true_window_risk)[0]
        if np.max(np.abs(Q_new - Q)) < tol:
            return proxy, Q_new
        Q = Q_new
    return proxy, Q
