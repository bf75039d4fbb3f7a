"""Ensemble of M action-value critics Q_m(o, a, rho_hat(a)).

Two member architectures share one code path for targets and selection:

* ``hidden_dim > 0``: input [features, one-hot(a), rho] -> tanh layer -> linear head.
* ``hidden_dim == 0``: per-action linear heads, q = x . w[:, a] + c[a] * rho.
  With one-hot state features this is a lookup table.

All members are stacked along a leading axis so forward and backward passes
for the whole ensemble are batched matmuls.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import checkpoint
from .optim import make_optimizer


@dataclass
class Transition:
    proxy_features: np.ndarray
    action: int
    shaped_reward: float
    raw_reward: float
    cost: float
    violation: bool
    predicted_risk_at_selection: float
    next_proxy_features: np.ndarray
    next_risk_vector: np.ndarray
    terminal: bool = False
    hazard: bool | None = None
    weight: float = 1.0

    def __post_init__(self):
        if self.hazard is None:
            self.hazard = bool(self.violation)


@dataclass
class TransitionBatch:
    features: np.ndarray
    actions: np.ndarray
    shaped_rewards: np.ndarray
    risks: np.ndarray
    next_features: np.ndarray
    next_risks: np.ndarray
    terminals: np.ndarray
    weights: np.ndarray
    hazards: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.actions)

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition]) -> "TransitionBatch":
        return cls(
            features=np.stack([np.asarray(t.proxy_features, float) for t in transitions]),
            actions=np.array([t.action for t in transitions], dtype=int),
            shaped_rewards=np.array([t.shaped_reward for t in transitions], dtype=float),
            risks=np.array([t.predicted_risk_at_selection for t in transitions], dtype=float),
            next_features=np.stack([np.asarray(t.next_proxy_features, float) for t in transitions]),
            next_risks=np.stack([np.asarray(t.next_risk_vector, float) for t in transitions]),
            terminals=np.array([t.terminal for t in transitions], dtype=bool),
            weights=np.array([t.weight for t in transitions], dtype=float),
            hazards=np.array([bool(t.hazard) for t in transitions], dtype=bool),
        )


class CriticEnsemble:
    def __init__(
        self,
        feature_dim: int,
        n_actions: int,
        ensemble_size: int = 5,
        hidden_dim: int = 64,
        discount: float = 0.95,
        learning_rate: float = 1e-3,
        sync_interval: int = 500,
        bootstrap_p: float = 0.5,
        optimizer: str = "adam",
        seed: int = 0,
        init: str = "random",
        init_value: float = 0.0,
        reward_clip: float | None = None,
        gated_bootstrap: bool = False,
        feature_offset=None,
        feature_scale=None,
    ):
        if ensemble_size < 1:
            raise ValueError("ensemble_size must be >= 1")
        if not 0.0 <= discount < 1.0:
            raise ValueError("discount must be in [0, 1)")
        if not 0.0 < bootstrap_p <= 1.0:
            raise ValueError("bootstrap_p must be in (0, 1]")
        if sync_interval < 1:
            raise ValueError("sync_interval must be >= 1")
        self.feature_dim = int(feature_dim)
        self.n_actions = int(n_actions)
        self.ensemble_size = int(ensemble_size)
        self.hidden_dim = int(hidden_dim)
        self.discount = float(discount)
        self.learning_rate = float(learning_rate)
        self.sync_interval = int(sync_interval)
        self.bootstrap_p = float(bootstrap_p)
        self.reward_clip = reward_clip
        self.gated_bootstrap = gated_bootstrap
        self.optimizer_name = optimizer
        self.feature_offset = np.zeros(self.feature_dim) if feature_offset is None else np.asarray(feature_offset, float)
        self.feature_scale = np.ones(self.feature_dim) if feature_scale is None else np.asarray(feature_scale, float)
        self.n_updates = 0
        self._rng = np.random.default_rng(seed + 7919)
        self.params = self._init_params(seed, init, init_value)
        self.optimizer = make_optimizer(optimizer, learning_rate)
        self.target_params = {k: v.copy() for k, v in self.params.items()}

    @property
    def linear(self) -> bool:
        return self.hidden_dim == 0

    def _init_params(self, seed, init, init_value):
        M, F, A, H = self.ensemble_size, self.feature_dim, self.n_actions, self.hidden_dim
        if init not in ("random", "zeros"):
            raise ValueError(f"unknown init {init!r}")
        if self.linear:
            return {"w": np.full((M, F, A), float(init_value)), "c": np.zeros((M, A))}
        params = {
            "wf": np.zeros((M, F, H)),
            "wa": np.zeros((M, A, H)),
            "wr": np.zeros((M, H)),
            "b1": np.zeros((M, H)),
            "w2": np.zeros((M, H)),
            "b2": np.zeros(M),
        }
        if init == "random":
            scale = 1.0 / np.sqrt(F + A + 1)
            for m in range(M):
                rng = np.random.default_rng([seed, m])
                params["wf"][m] = rng.normal(0.0, scale, size=(F, H))
                params["wa"][m] = rng.normal(0.0, scale, size=(A, H))
                params["wr"][m] = rng.normal(0.0, scale, size=H)
                params["w2"][m] = rng.normal(0.0, 0.1 / np.sqrt(H), size=H)
        return params

    def _norm(self, features):
        features = np.atleast_2d(np.asarray(features, dtype=float))
        if features.shape[1] != self.feature_dim:
            raise ValueError(f"expected {self.feature_dim} features, got {features.shape[1]}")
        return (features - self.feature_offset) / self.feature_scale

    # -- forward ---------------------------------------------------------

    def _q_taken(self, params, x, actions, rho):
        """Q for one action per row. Returns (q (M, N), cache)."""
        if self.linear:
            q_all = np.matmul(x[None], params["w"])
            n = np.arange(len(actions))
            q = q_all[:, n, actions] + params["c"][:, actions] * rho[None, :]
            return q, None
        base = np.matmul(x[None], params["wf"])
        pre = base + params["wa"][:, actions, :] + rho[None, :, None] * params["wr"][:, None, :] + params["b1"][:, None, :]
        h = np.tanh(pre)
        q = np.matmul(h, params["w2"][:, :, None])[:, :, 0] + params["b2"][:, None]
        return q, h

    def _q_all(self, params, x, risks):
        """Q for every action. x (N, F), risks (N, A) -> (M, N, A)."""
        if self.linear:
            return np.matmul(x[None], params["w"]) + params["c"][:, None, :] * risks[None, :, :]
        base = np.matmul(x[None], params["wf"])
        pre = (
            base[:, :, None, :]
            + params["wa"][:, None, :, :]
            + risks[None, :, :, None] * params["wr"][:, None, None, :]
            + params["b1"][:, None, None, :]
        )
        return np.matmul(np.tanh(pre), params["w2"][:, None, :, None])[..., 0] + params["b2"][:, None, None]

    def q_values(self, features, risks) -> np.ndarray:
        """M x |A| matrix for a single proxy state."""
        risks = np.asarray(risks, dtype=float)
        if risks.shape != (self.n_actions,):
            raise ValueError(f"risk vector must have length {self.n_actions}")
        return self._q_all(self.params, self._norm(features), risks[None, :])[:, 0, :]

    def q_values_batch(self, features, risks, target: bool = False) -> np.ndarray:
        params = self.target_params if target else self.params
        return self._q_all(params, self._norm(features), np.atleast_2d(np.asarray(risks, float)))

    # -- learning --------------------------------------------------------

    def _bootstrap_values(self, batch: TransitionBatch, r_max: float) -> np.ndarray:
        """(M, N) next-state values through the safe-restricted max."""
        next_risks = batch.next_risks
        q_next = self._q_all(self.target_params, self._norm(batch.next_features), next_risks)
        safe = next_risks <= r_max
        any_safe = safe.any(axis=1)
        fallback = np.argmin(next_risks, axis=1)
        n = np.arange(len(batch))
        if self.gated_bootstrap:
            rho = np.clip(next_risks, 0.0, 1.0)
            gate = (1.0 - rho) * q_next.max(axis=0) + rho * q_next.min(axis=0)
            chosen = np.where(any_safe, np.argmax(np.where(safe, gate, -np.inf), axis=1), fallback)
            return np.broadcast_to(gate[n, chosen], q_next.shape[:2]).copy()
        restricted = np.where(safe[None, :, :], q_next, -np.inf).max(axis=2)
        return np.where(any_safe[None, :], restricted, q_next[:, n, fallback])

    def td_targets(self, batch: TransitionBatch, r_max: float) -> np.ndarray:
        rewards = batch.shaped_rewards
        if self.reward_clip is not None:
            rewards = np.clip(rewards, -self.reward_clip, self.reward_clip)
        boot = self._bootstrap_values(batch, r_max)
        return rewards[None, :] + self.discount * (~batch.terminals)[None, :] * boot

    def loss_and_grad(self, batch: TransitionBatch, targets: np.ndarray, mask: np.ndarray):
        """Per-member weighted squared TD error and gradients. Returns (losses (M,), grads)."""
        x = self._norm(batch.features)
        actions = batch.actions
        rho = batch.risks
        q, h = self._q_taken(self.params, x, actions, rho)
        w = mask * batch.weights[None, :]
        denom = np.maximum(w.sum(axis=1), 1e-12)
        err = q - targets
        losses = (w * err * err).sum(axis=1) / denom
        dq = 2.0 * w * err / denom[:, None]
        grads = {}
        if self.linear:
            onehot = np.zeros((len(actions), self.n_actions))
            onehot[np.arange(len(actions)), actions] = 1.0
            grads["w"] = np.matmul(x.T[None], dq[:, :, None] * onehot[None])
            grads["c"] = np.einsum("mn,n,na->ma", dq, rho, onehot)
            return losses, grads
        p = self.params
        grads["w2"] = np.matmul(dq[:, None, :], h)[:, 0, :]
        grads["b2"] = dq.sum(axis=1)
        dpre = dq[:, :, None] * p["w2"][:, None, :] * (1.0 - h * h)
        grads["wf"] = np.matmul(x.T[None], dpre)
        onehot = np.zeros((len(actions), self.n_actions))
        onehot[np.arange(len(actions)), actions] = 1.0
        grads["wa"] = np.matmul(onehot.T[None], dpre)
        grads["wr"] = np.matmul(rho[None, None, :], dpre)[:, 0, :]
        grads["b1"] = dpre.sum(axis=1)
        return losses, grads

    def bootstrap_mask(self, n: int) -> np.ndarray:
        if self.bootstrap_p >= 1.0:
            return np.ones((self.ensemble_size, n))
        return (self._rng.random((self.ensemble_size, n)) < self.bootstrap_p).astype(float)

    def td_update(self, batch, r_max: float = 1.0) -> float | None:
        """One gradient step per member. Returns the mean TD loss before the step."""
        if not isinstance(batch, TransitionBatch):
            if len(batch) == 0:
                return None
            batch = TransitionBatch.from_transitions(batch)
        if len(batch) == 0:
            return None
        targets = self.td_targets(batch, r_max)
        mask = self.bootstrap_mask(len(batch))
        losses, grads = self.loss_and_grad(batch, targets, mask)
        self.optimizer.step(self.params, grads)
        self.n_updates += 1
        if self.n_updates % self.sync_interval == 0:
            self.sync_targets()
        return float(losses.mean())

    def sync_targets(self) -> None:
        self.target_params = {k: v.copy() for k, v in self.params.items()}

    # -- persistence -----------------------------------------------------

    def state_dict(self) -> dict:
        out = {}
        for k, v in self.params.items():
            out[f"online.{k}"] = v.copy()
        for k, v in self.target_params.items():
            out[f"target.{k}"] = v.copy()
        out["feature_offset"] = self.feature_offset.copy()
        out["feature_scale"] = self.feature_scale.copy()
        out["n_updates"] = np.array([float(self.n_updates)])
        return out

    def load_state_dict(self, state: dict) -> None:
        for k in self.params:
            self.params[k] = np.array(state[f"online.{k}"], dtype=float)
            self.target_params[k] = np.array(state[f"target.{k}"], dtype=float)
        self.feature_offset = np.array(state["feature_offset"], dtype=float)
        self.feature_scale = np.array(state["feature_scale"], dtype=float)
        self.n_updates = int(state["n_updates"][0])

    def save(self, path) -> None:
        meta = {
            "feature_dim": self.feature_dim,
            "n_actions": self.n_actions,
            "ensemble_size": self.ensemble_size,
            "hidden_dim": self.hidden_dim,
            "discount": self.discount,
            "learning_rate": self.learning_rate,
            "sync_interval": self.sync_interval,
            "bootstrap_p": self.bootstrap_p,
            "optimizer": self.optimizer_name,
        }
        checkpoint.save_arrays(path, self.state_dict(), kind="critic_ensemble", meta=meta)

    @classmethod
    def load(cls, path) -> "CriticEnsemble":
        kind, meta, arrays = checkpoint.load_arrays(path)
        if kind != "critic_ensemble":
            raise ValueError(f"{path} holds a {kind!r} checkpoint")
        ens = cls(init="zeros", **meta)
        ens.load_state_dict(arrays)
        return ens


def q_values(ensemble: CriticEnsemble, state, risks) -> np.ndarray:
    return ensemble.q_values(getattr(state, "features", state), risks)


def td_update(ensemble: CriticEnsemble, batch, gate_cfg) -> float | None:
    return ensemble.td_update(batch, r_max=gate_cfg.r_max)


def sync_targets(ensemble: CriticEnsemble) -> None:
    ensemble.sync_targets()
