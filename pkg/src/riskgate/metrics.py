"""Evaluation quantities: glycemic metrics, navigation reward/cost, risk calibration, ranks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

COST_LIMIT_REFERENCE = 25.0


@dataclass(frozen=True)
class GlucoseMetrics:
    tir_pct: float
    time_below_70_pct: float
    time_above_180_pct: float
    mean_bg: float
    runtime_s: float = float("nan")
    per_step_latency_ms: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class NavMetrics:
    avg_reward: float
    avg_cost: float
    j_r: float
    j_c: float
    reward_per_cost: float
    reward_per_cost_infinite: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RiskCalibration:
    mean_signed_error: float
    mae: float
    rmse: float
    pearson_r: float
    pearson_defined: bool
    hellinger: float
    hellinger_bernoulli: float
    pred_exceed_pct: float
    posthoc_exceed_pct: float
    threshold_agreement_pct: float

    def to_dict(self) -> dict:
        return asdict(self)


def glucose_metrics(glucose, runtime_s: float = float("nan"), latencies_s=None,
                    g_low: float = 70.0, g_high: float = 180.0) -> GlucoseMetrics:
    """Percent of samples in [g_low, g_high], strictly below, strictly above.

    Args:
        glucose: true (latent) glucose samples, one per decision step.
        runtime_s: wall-clock runtime to report alongside.
        latencies_s: per-step decision latencies in seconds, averaged to ms.
    """
    g = np.asarray(glucose, dtype=float).ravel()
    if g.size == 0:
        raise ValueError("glucose trace is empty")
    n = g.size
    below = int(np.sum(g < g_low))
    above = int(np.sum(g > g_high))
    inside = n - below - above
    latency = float("nan")
    if latencies_s is not None and len(latencies_s):
        latency = 1000.0 * float(np.mean(latencies_s))
    return GlucoseMetrics(
        tir_pct=100.0 * inside / n,
        time_below_70_pct=100.0 * below / n,
        time_above_180_pct=100.0 * above / n,
        mean_bg=float(g.mean()),
        runtime_s=float(runtime_s),
        per_step_latency_ms=latency,
    )


def nav_metrics(episode_rewards, episode_costs, reference_reward: float,
                cost_limit: float = COST_LIMIT_REFERENCE) -> NavMetrics:
    """Per-episode means, normalised by a reference reward and the cost limit."""
    rewards = np.asarray(episode_rewards, dtype=float)
    costs = np.asarray(episode_costs, dtype=float)
    if rewards.size == 0 or rewards.size != costs.size:
        raise ValueError("need equal, nonzero numbers of episode rewards and costs")
    if reference_reward is None or not reference_reward > 0:
        raise ValueError("reference_reward must be a positive number")
    avg_r, avg_c = float(rewards.mean()), float(costs.mean())
    infinite = avg_c == 0.0
    return NavMetrics(
        avg_reward=avg_r,
        avg_cost=avg_c,
        j_r=avg_r / reference_reward,
        j_c=avg_c / cost_limit,
        reward_per_cost=math.inf if infinite else avg_r / avg_c,
        reward_per_cost_infinite=infinite,
    )


def hellinger_normalized(p, q) -> float:
    """Hellinger distance between two nonnegative sequences rescaled to sum to 1.

    Two all-zero sequences are at distance 0; an all-zero sequence against a
    nonzero one is at the maximum distance 1.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    sp, sq = p.sum(), q.sum()
    if sp == 0 and sq == 0:
        return 0.0
    if sp == 0 or sq == 0:
        return 1.0
    h = np.sqrt(0.5 * np.sum((np.sqrt(p / sp) - np.sqrt(q / sq)) ** 2))
    return float(min(1.0, h))


def hellinger_bernoulli(p, q) -> float:
    """Mean over steps of the Hellinger distance between Bernoulli(p_t) and Bernoulli(q_t)."""
    p = np.clip(np.asarray(p, dtype=float), 0.0, 1.0)
    q = np.clip(np.asarray(q, dtype=float), 0.0, 1.0)
    bc = np.sqrt(p * q) + np.sqrt((1 - p) * (1 - q))
    return float(np.mean(np.sqrt(np.clip(1.0 - bc, 0.0, 1.0))))


def risk_calibration(predicted, posthoc, r_max: float) -> RiskCalibration:
    """Compare online predicted risk with risk recomputed from realized outcomes."""
    pred = np.asarray(predicted, dtype=float).ravel()
    post = np.asarray(posthoc, dtype=float).ravel()
    if pred.shape != post.shape:
        raise ValueError(f"length mismatch: {pred.size} predicted vs {post.size} post-hoc")
    if pred.size < 2:
        raise ValueError("need at least two steps")
    err = pred - post
    defined = bool(np.ptp(pred) > 0 and np.ptp(post) > 0)
    r = float(np.corrcoef(pred, post)[0, 1]) if defined else float("nan")
    pred_hi, post_hi = pred > r_max, post > r_max
    return RiskCalibration(
        mean_signed_error=float(err.mean()),
        mae=float(np.abs(err).mean()),
        rmse=float(np.sqrt(np.mean(err * err))),
        pearson_r=r,
        pearson_defined=defined,
        hellinger=hellinger_normalized(pred, post),
        hellinger_bernoulli=hellinger_bernoulli(pred, post),
        pred_exceed_pct=100.0 * float(pred_hi.mean()),
        posthoc_exceed_pct=100.0 * float(post_hi.mean()),
        threshold_agreement_pct=100.0 * float(np.mean(pred_hi == post_hi)),
    )


def average_ranks(values, higher_is_better: bool) -> np.ndarray:
    """Ordinal ranks starting at 1 with ties sharing their average rank."""
    v = np.asarray(values, dtype=float)
    key = -v if higher_is_better else v
    order = np.argsort(key, kind="stable")
    ranks = np.empty(len(v))
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and key[order[j + 1]] == key[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def mean_rank(table: Mapping[str, Sequence[float]], higher_is_better: Sequence[bool]) -> dict:
    """Average of per-metric ranks for each algorithm.

    Args:
        table: algorithm name -> metric values, in a fixed metric order.
        higher_is_better: one direction flag per metric.
    """
    names = list(table)
    if len(names) < 2:
        raise ValueError("need at least two algorithms to rank")
    values = np.array([list(table[n]) for n in names], dtype=float)
    if values.shape[1] != len(higher_is_better):
        raise ValueError("one direction flag per metric is required")
    ranks = np.column_stack([average_ranks(values[:, k], hib) for k, hib in enumerate(higher_is_better)])
    return {n: float(ranks[i].mean()) for i, n in enumerate(names)}


GLUCOSE_RANK_DIRECTIONS = (True, False, False)


def glucose_mean_rank(table: Mapping[str, GlucoseMetrics | Sequence[float]]) -> dict:
    """Mean rank over (TIR, time below 70, time above 180)."""
    rows = {}
    for name, m in table.items():
        if isinstance(m, GlucoseMetrics):
            rows[name] = (m.tir_pct, m.time_below_70_pct, m.time_above_180_pct)
        else:
            rows[name] = tuple(m)[:3]
    return mean_rank(rows, GLUCOSE_RANK_DIRECTIONS)


def mean_sd(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(values, dtype=float)
    sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return float(v.mean()), sd


def format_mean_sd(values, digits: int = 1) -> str:
    m, s = mean_sd(values)
    return f"{m:.{digits}f} ± {s:.{digits}f}"
