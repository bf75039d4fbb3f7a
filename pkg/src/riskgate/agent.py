"""The interaction loop: proxy state, risk, gate, select, execute, store, learn."""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import core
from .core import GateConfig, NULL_ACTION
from .critics import CriticEnsemble, Transition, TransitionBatch
from .envs.base import nearest_on_grid
from .episode import EpisodeLog, StepRecord
from .replay import ReplayBuffer
from .risk import ConstantRisk, RiskModel

DEFAULT_SEEDS = (42, 123, 456)


@dataclass(frozen=True)
class TeacherConfig:
    k_p: float = 0.02
    k_meal: float = 0.3
    target: float = 140.0
    trend_threshold: float = 1.0
    floor: float = 100.0
    dt_min: float = 3.0


@dataclass(frozen=True)
class ShieldConfig:
    hard_floor: float = 90.0
    soft_floor: float = 120.0
    trend_limit: float = -1.0
    dt_min: float = 3.0


@dataclass(frozen=True)
class AgentConfig:
    gate: GateConfig = field(default_factory=GateConfig)
    warmup_steps: int = 0
    shield_enabled: bool = False
    update_every: int = 1
    batch_size: int = 64
    risk_updates_per_step: int = 1
    critic_updates_per_step: int = 1
    learning_starts: int | None = None
    seed: int = 42
    risk_horizon: int = 1
    risk_hidden: int = 32
    risk_lr: float = 0.01
    critic_hidden: int = 64
    critic_lr: float = 1e-3
    critic_optimizer: str = "adam"
    sync_interval: int = 500
    bootstrap_p: float = 0.5
    reward_clip: float | None = 1.0
    gated_bootstrap: bool = False
    replay_capacity: int = 100_000
    epsilon: float = 0.0
    policy: str = "learned"
    pinned_risk: float | None = None

    def __post_init__(self):
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.update_every < 1:
            raise ValueError("update_every must be >= 1")
        if self.risk_horizon < 1:
            raise ValueError("risk_horizon must be >= 1")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must be in [0, 1]")
        if self.policy not in ("learned", "teacher", "random"):
            raise ValueError(f"unknown policy {self.policy!r}")


def cgm_trend(cgm_window, dt_min: float = 3.0) -> float:
    """Average slope over the window in mg/dL/min (0 for a single reading)."""
    cgm = np.asarray(cgm_window, dtype=float).ravel()
    if len(cgm) < 2:
        return 0.0
    return float((cgm[-1] - cgm[0]) / ((len(cgm) - 1) * dt_min))


def teacher_action(cgm_window, cfg: TeacherConfig = TeacherConfig(), action_grid=(0.0, 0.5, 1.0, 2.0, 4.0)) -> float:
    """Proportional correction plus a meal term, projected to the nearest grid dose."""
    cgm = float(np.asarray(cgm_window, dtype=float).ravel()[-1])
    if cgm < cfg.floor:
        return 0.0
    trend = cgm_trend(cgm_window, cfg.dt_min)
    meal_rise = trend if trend > cfg.trend_threshold else 0.0
    raw = cfg.k_p * max(0.0, cgm - cfg.target) + cfg.k_meal * meal_rise
    return float(action_grid[nearest_on_grid(raw, action_grid)])


def shield_fires(cgm_window, cfg: ShieldConfig = ShieldConfig()) -> bool:
    cgm = float(np.asarray(cgm_window, dtype=float).ravel()[-1])
    trend = cgm_trend(cgm_window, cfg.dt_min)
    return cgm < cfg.hard_floor or (cgm < cfg.soft_floor and trend < cfg.trend_limit)


def apply_shield(cgm_window, bolus: float, cfg: ShieldConfig = ShieldConfig()) -> float:
    """Zero insulin when glucose is low or falling near the low range."""
    return 0.0 if shield_fires(cgm_window, cfg) else bolus


def glucose_teacher(action_grid, cfg: TeacherConfig = TeacherConfig()) -> Callable:
    """Teacher over the agent's raw window, returning an action index."""
    grid = tuple(float(x) for x in action_grid)

    def teacher(window) -> int:
        cgm = [np.atleast_1d(o)[0] for o, _ in window]
        return grid.index(teacher_action(cgm, cfg, grid))

    return teacher


def glucose_shield(cfg: ShieldConfig = ShieldConfig()) -> Callable:
    """Shield over the agent's raw window. Index 0 is the zero dose."""

    def shield(window, action: int) -> tuple[int, bool]:
        cgm = [np.atleast_1d(o)[0] for o, _ in window]
        if action != 0 and shield_fires(cgm, cfg):
            return 0, True
        return action, False

    return shield


@dataclass
class Decision:
    proxy: core.ProxyState
    risks: np.ndarray
    q_gate: np.ndarray
    action: int
    fallback: bool
    shield: bool
    source: str
    latency: float


class RiskGatedAgent:
    """Owns the risk model, critic ensemble and replay buffer of one experiment.

    Args:
        cfg: agent configuration.
        n_actions: size of the discrete action set.
        recipe: feature recipe turning a raw window into proxy features.
        feature_dim: length of the proxy feature vector.
        feature_offset, feature_scale: input normalisation shared by the models.
        teacher: window -> action index, used during warmup or as the policy.
        shield: (window, action) -> (action, fired), applied after selection.
    """

    def __init__(
        self,
        cfg: AgentConfig,
        n_actions: int,
        recipe,
        feature_dim: int,
        feature_offset=None,
        feature_scale=None,
        teacher: Callable | None = None,
        shield: Callable | None = None,
    ):
        self.cfg = cfg
        self.gate = cfg.gate
        self.n_actions = n_actions
        self.recipe = recipe
        self.feature_dim = feature_dim
        self.teacher = teacher
        self.shield = shield if cfg.shield_enabled else None
        if cfg.pinned_risk is not None:
            self.risk = ConstantRisk(n_actions, cfg.pinned_risk)
        else:
            self.risk = RiskModel(
                feature_dim, n_actions, cfg.risk_hidden, cfg.risk_lr, seed=cfg.seed,
                feature_offset=feature_offset, feature_scale=feature_scale,
            )
        self.critics = CriticEnsemble(
            feature_dim, n_actions,
            ensemble_size=cfg.gate.ensemble_size,
            hidden_dim=cfg.critic_hidden,
            discount=cfg.gate.discount,
            learning_rate=cfg.critic_lr,
            sync_interval=cfg.sync_interval,
            bootstrap_p=cfg.bootstrap_p,
            optimizer=cfg.critic_optimizer,
            seed=cfg.seed,
            reward_clip=cfg.reward_clip,
            gated_bootstrap=cfg.gated_bootstrap,
            feature_offset=feature_offset,
            feature_scale=feature_scale,
        )
        self.replay = ReplayBuffer(cfg.replay_capacity, seed=cfg.seed + 1)
        self.rng = np.random.default_rng(cfg.seed + 2)
        self.total_steps = 0
        self.latencies: list[float] = []
        self.learning = True
        self._window: deque = deque(maxlen=cfg.gate.window_len)
        self._open: dict | None = None
        self._pending: deque = deque()

    # -- episode bookkeeping ----------------------------------------------

    def begin_episode(self, observation) -> None:
        self._window.clear()
        self._window.append((np.atleast_1d(np.asarray(observation, float)), NULL_ACTION))
        self._open = None
        self._pending.clear()

    def proxy(self) -> core.ProxyState:
        return core.build_proxy_state(list(self._window), self.recipe, self.gate.window_len)

    @property
    def in_warmup(self) -> bool:
        return self.total_steps < self.cfg.warmup_steps

    # -- acting ----------------------------------------------------------

    def act(self) -> Decision:
        start = time.perf_counter()
        proxy = self.proxy()
        risks = np.asarray(self.risk.predict_all(proxy.features), dtype=float)
        q = self.critics.q_values(proxy.features, risks)
        ev = core.evaluate(q, risks, self.gate.r_max)
        latency = time.perf_counter() - start
        self.latencies.append(latency)

        action, source, fallback = ev.chosen_action, "agent", ev.fallback_used
        if self.cfg.policy == "random":
            action, source, fallback = int(self.rng.integers(self.n_actions)), "random", False
        elif self.cfg.policy == "teacher" or (self.in_warmup and self.teacher is not None):
            action, source, fallback = int(self.teacher(list(self._window))), "teacher", False
        elif self.cfg.epsilon > 0 and self.rng.random() < self.cfg.epsilon:
            # explore inside the safe set; anywhere only when nothing is admissible
            pool = np.flatnonzero(ev.safe_mask) if ev.safe_mask.any() else np.arange(self.n_actions)
            action, source = int(self.rng.choice(pool)), "explore"
        fired = False
        if self.shield is not None:
            action, fired = self.shield(list(self._window), action)
        self._close_transition(proxy.features, risks)
        return Decision(proxy, risks, ev.q_gate, int(action), bool(fallback), bool(fired), source, latency)

    # -- outcome ---------------------------------------------------------

    def observe(self, decision: Decision, step) -> float:
        """Record the outcome of ``decision``. Returns the shaped reward."""
        rho = float(decision.risks[decision.action])
        shaped = core.shaped_reward(step.raw_reward, rho, self.gate.lambda_risk)
        self._open = dict(
            proxy_features=decision.proxy.features, action=decision.action, shaped_reward=shaped,
            raw_reward=float(step.raw_reward), cost=float(step.cost), violation=bool(step.violation),
            predicted_risk_at_selection=rho, terminal=bool(step.terminal),
        )
        self._window.append((np.atleast_1d(np.asarray(step.observation, float)), decision.action))
        self.total_steps += 1
        if step.terminal:
            self._close_transition(np.zeros(self.feature_dim), np.zeros(self.n_actions))
        if self.learning:
            self.maybe_update()
        return shaped

    def _close_transition(self, next_features, next_risks) -> None:
        if self._open is None:
            return
        t = Transition(next_proxy_features=np.asarray(next_features, float),
                       next_risk_vector=np.asarray(next_risks, float), **self._open)
        self._open = None
        self._pending.append(t)
        h = self.cfg.risk_horizon
        if len(self._pending) >= h:
            head = self._pending.popleft()
            head.hazard = any(p.violation for p in [head] + list(self._pending)[: h - 1])
            self.replay.push(head)

    def end_episode(self) -> None:
        """Close the last transition and flush pending ones with partial lookahead."""
        if self._open is not None:
            proxy = self.proxy()
            self._close_transition(proxy.features, self.risk.predict_all(proxy.features))
        while self._pending:
            head = self._pending.popleft()
            head.hazard = any(p.violation for p in [head] + list(self._pending)[: self.cfg.risk_horizon - 1])
            self.replay.push(head)

    # -- learning --------------------------------------------------------

    def maybe_update(self) -> None:
        cfg = self.cfg
        if cfg.policy != "learned":
            return
        starts = cfg.warmup_steps if cfg.learning_starts is None else cfg.learning_starts
        if self.total_steps < max(starts, 1) or len(self.replay) < 1:
            return
        if self.total_steps % cfg.update_every:
            return
        for _ in range(cfg.risk_updates_per_step):
            b = self.replay.sample_batch(cfg.batch_size)
            self.risk.update(b.features, b.actions, b.hazards.astype(float))
        for _ in range(cfg.critic_updates_per_step):
            b = self.replay.sample_batch(cfg.batch_size)
            # next-state risks come from the current risk model, not the stale stored copy
            b.next_risks = np.asarray(self.risk.predict_all_batch(b.next_features), dtype=float)
            self.critics.td_update(b, r_max=self.gate.r_max)


def run_episode(
    env,
    agent: RiskGatedAgent,
    n_steps: int,
    observation=None,
    start: bool = True,
    learn: bool = True,
    t0: int = 0,
) -> EpisodeLog:
    """Run ``n_steps`` of the loop and return their log.

    Args:
        env: any environment with ``step``, ``latent`` and ``reset``.
        agent: the agent; its models are updated in place when ``learn``.
        n_steps: number of decisions.
        observation: the current observation; ``env.reset()`` is called if omitted.
        start: begin a fresh window. Pass False to continue a previous segment
            of the same trajectory (e.g. evaluation days after training days).
        learn: whether models are updated during this segment.
        t0: time index of the first step, for logging.
    """
    if start:
        if observation is None:
            observation = env.reset()
        agent.begin_episode(observation)
    agent.learning = learn
    log = EpisodeLog(meta={"learn": learn})
    try:
        for k in range(n_steps):
            latent = env.latent()
            obs = agent._window[-1][0]
            decision = agent.act()
            step = env.step(decision.action)
            shaped = agent.observe(decision, step)
            log.append(StepRecord(
                t=t0 + k, observation=obs, action=decision.action, reward=float(step.raw_reward),
                cost=float(step.cost), violation=bool(step.violation), shaped_reward=shaped,
                risks=decision.risks, q_gate=decision.q_gate, fallback=decision.fallback,
                shield=decision.shield, source=decision.source, latent=latent,
                features=decision.proxy.features,
            ))
            if step.terminal:
                agent.begin_episode(env.reset())
    finally:
        agent.learning = True
    return log
