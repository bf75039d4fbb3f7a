"""Decision-time math: proxy states, gated values, safe-set selection.

Everything here is pure. No learning, no I/O, no environment knowledge beyond
the feature recipes, which only describe how a window of (observation, action)
pairs is flattened into a vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

# Action slot used when padding the start of an episode.
NULL_ACTION = -1


@dataclass(frozen=True)
class GateConfig:
    r_max: float = 0.25
    lambda_risk: float = 0.0
    window_len: int = 8
    ensemble_size: int = 5
    discount: float = 0.95

    def __post_init__(self):
        if not 0.0 <= self.r_max <= 1.0:
            raise ValueError(f"r_max must be in [0, 1], got {self.r_max}")
        if self.lambda_risk < 0.0:
            raise ValueError(f"lambda_risk must be >= 0, got {self.lambda_risk}")
        if int(self.window_len) != self.window_len or self.window_len < 1:
            raise ValueError(f"window_len must be an integer >= 1, got {self.window_len}")
        if int(self.ensemble_size) != self.ensemble_size or self.ensemble_size < 1:
            raise ValueError(f"ensemble_size must be an integer >= 1, got {self.ensemble_size}")
        if not 0.0 < self.discount < 1.0:
            raise ValueError(f"discount must be in (0, 1), got {self.discount}")


@dataclass(frozen=True)
class ProxyState:
    features: np.ndarray
    window_len: int
    raw_window: tuple = field(default=(), repr=False)


@dataclass(frozen=True)
class GatedEvaluation:
    q_plus: np.ndarray
    q_minus: np.ndarray
    q_gate: np.ndarray
    safe_mask: np.ndarray
    chosen_action: int
    fallback_used: bool


class FeatureRecipe(Protocol):
    """Maps a full window of (observation, action) pairs to a feature vector."""

    def dim(self, window_len: int) -> int: ...

    def __call__(self, observations: np.ndarray, actions: np.ndarray) -> np.ndarray: ...


class GlucoseFeatures:
    """[latest CGM, CGM trend (mg/dL/min), last dose, insulin-on-board].

    ``action_values`` maps action indices to insulin units. Without it the
    action entries of the window are taken to be doses already.
    """

    def __init__(self, decay: float = 0.5, dt_min: float = 3.0, action_values=None):
        if not 0.0 <= decay <= 1.0:
            raise ValueError("decay must be in [0, 1]")
        self.decay = decay
        self.dt_min = dt_min
        self.action_values = None if action_values is None else np.asarray(action_values, dtype=float)

    def dim(self, window_len: int) -> int:
        return 4

    def doses(self, actions: np.ndarray) -> np.ndarray:
        actions = np.asarray(actions)
        null = actions == NULL_ACTION
        if self.action_values is None:
            doses = actions.astype(float)
        else:
            doses = self.action_values[np.where(null, 0, actions).astype(int)]
        return np.where(null, 0.0, doses)

    def __call__(self, observations, actions):
        cgm = np.asarray(observations, dtype=float).reshape(len(observations), -1)[:, 0]
        doses = self.doses(actions)
        w = len(cgm)
        lag = w - 1
        trend = 0.0 if lag == 0 else (cgm[-1] - cgm[0]) / (lag * self.dt_min)
        # newest entry has weight decay**0
        weights = self.decay ** np.arange(w - 1, -1, -1, dtype=float)
        iob = float(np.dot(doses, weights))
        return np.array([cgm[-1], trend, doses[-1], iob])


class NavigationFeatures:
    """Flattened observation window followed by one-hot recent actions."""

    def __init__(self, obs_dim: int, n_actions: int):
        self.obs_dim = obs_dim
        self.n_actions = n_actions

    def dim(self, window_len: int) -> int:
        return window_len * (self.obs_dim + self.n_actions)

    def __call__(self, observations, actions):
        obs = np.asarray(observations, dtype=float).reshape(len(observations), self.obs_dim)
        actions = np.asarray(actions, dtype=int)
        onehot = np.zeros((len(actions), self.n_actions))
        valid = actions != NULL_ACTION
        onehot[np.nonzero(valid)[0], actions[valid]] = 1.0
        return np.concatenate([obs.ravel(), onehot.ravel()])


def pad_window(window: Sequence, window_len: int) -> list:
    """Left-pad a short history by repeating its earliest observation with a null action."""
    window = list(window)
    if not window:
        raise ValueError("window must contain at least one (observation, action) pair")
    if len(window) < window_len:
        first_obs = window[0][0]
        window = [(first_obs, NULL_ACTION)] * (window_len - len(window)) + window
    return window


def build_proxy_state(window: Sequence, recipe: FeatureRecipe, window_len: int | None = None) -> ProxyState:
    """Summarise the last W (observation, action) pairs into a ProxyState.

    Args:
        window: (observation, action) pairs, oldest first. The action paired with
            an observation is the one executed just before it was seen.
        recipe: environment-specific feature construction.
        window_len: W. Defaults to ``len(window)``; shorter windows are padded.
    """
    if window_len is None:
        window_len = len(window)
    padded = pad_window(window, window_len)
    if len(padded) != window_len:
        raise ValueError(f"window has {len(padded)} entries, expected {window_len}")
    observations = np.array([np.atleast_1d(np.asarray(o, dtype=float)) for o, _ in padded])
    actions = np.array([int(a) for _, a in padded])
    if not np.all(np.isfinite(observations)):
        raise ValueError("window contains non-finite observations")
    features = np.asarray(recipe(observations, actions), dtype=float)
    if not np.all(np.isfinite(features)):
        raise ValueError("feature recipe produced non-finite values")
    return ProxyState(features=features, window_len=window_len, raw_window=tuple(padded))


def gate_values(q_per_member, risks):
    """Optimistic/conservative envelopes and their risk-weighted mix.

    Returns:
        (q_plus, q_minus, q_gate), each of length |A|.
    """
    q = np.asarray(q_per_member, dtype=float)
    if q.ndim == 1:
        q = q[None, :]
    if q.ndim != 2 or q.shape[0] == 0 or q.shape[1] == 0:
        raise ValueError(f"expected a non-empty M x |A| matrix, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise ValueError("q values must be finite")
    rho = np.clip(np.asarray(risks, dtype=float), 0.0, 1.0)
    if rho.shape != (q.shape[1],):
        raise ValueError(f"risk vector has shape {rho.shape}, expected ({q.shape[1]},)")
    q_plus = q.max(axis=0)
    q_minus = q.min(axis=0)
    q_gate = (1.0 - rho) * q_plus + rho * q_minus
    # rounding can push the mix a ulp outside the envelope
    q_gate = np.clip(q_gate, q_minus, q_plus)
    return q_plus, q_minus, q_gate


def safe_mask(risks, r_max: float) -> np.ndarray:
    return np.asarray(risks, dtype=float) <= r_max


def select_action(q_gate, risks, r_max: float) -> tuple[int, bool]:
    """Argmax of the gated value over admissible actions, else the min-risk action.

    Ties go to the lowest action index.
    """
    q_gate = np.asarray(q_gate, dtype=float)
    risks = np.asarray(risks, dtype=float)
    if q_gate.ndim != 1 or q_gate.shape != risks.shape or q_gate.size == 0:
        raise ValueError("q_gate and risks must be non-empty vectors of equal length")
    admissible = risks <= r_max
    if admissible.any():
        masked = np.where(admissible, q_gate, -np.inf)
        return int(np.argmax(masked)), False
    return int(np.argmin(risks)), True


def evaluate(q_per_member, risks, r_max: float) -> GatedEvaluation:
    q_plus, q_minus, q_gate = gate_values(q_per_member, risks)
    action, fallback = select_action(q_gate, risks, r_max)
    return GatedEvaluation(
        q_plus=q_plus,
        q_minus=q_minus,
        q_gate=q_gate,
        safe_mask=safe_mask(risks, r_max),
        chosen_action=action,
        fallback_used=fallback,
    )


def shaped_reward(raw_reward: float, predicted_risk: float, lambda_risk: float) -> float:
    return raw_reward - lambda_risk * predicted_risk
