"""Action-conditioned near-term hazard predictor.

A one-hidden-layer tanh network over (normalised proxy features, one-hot
action) with a sigmoid output, trained by plain SGD on binary cross-entropy
against horizon-h violation labels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from .episode import EpisodeLog

_LOGIT_CLIP = 30.0


@dataclass(frozen=True)
class HazardLabel:
    window_features: np.ndarray
    action: int
    violated: bool
    partial: bool = False


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


class RiskModel:
    """Binary-probability regressor rho_hat(o, a) in (0, 1).

    ``init="random"`` draws the hidden layer from a seeded Gaussian and zeroes
    the output layer, so a fresh model still predicts exactly 0.5 everywhere
    while having non-degenerate hidden units. ``init="zeros"`` zeroes
    everything (only the output bias can then learn).
    """

    def __init__(
        self,
        feature_dim: int,
        n_actions: int,
        hidden_dim: int = 32,
        learning_rate: float = 0.01,
        seed: int = 0,
        init: str = "random",
        feature_offset=None,
        feature_scale=None,
    ):
        if learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        self.feature_dim = int(feature_dim)
        self.n_actions = int(n_actions)
        self.hidden_dim = int(hidden_dim)
        self.learning_rate = float(learning_rate)
        self.input_dim = self.feature_dim + self.n_actions
        self.feature_offset = np.zeros(self.feature_dim) if feature_offset is None else np.asarray(feature_offset, float)
        self.feature_scale = np.ones(self.feature_dim) if feature_scale is None else np.asarray(feature_scale, float)
        self.updates_seen = 0
        rng = np.random.default_rng(seed)
        if init == "random":
            w1 = rng.normal(0.0, 1.0 / np.sqrt(self.input_dim), size=(self.input_dim, self.hidden_dim))
        elif init == "zeros":
            w1 = np.zeros((self.input_dim, self.hidden_dim))
        else:
            raise ValueError(f"unknown init {init!r}")
        self.params = {
            "w1": w1,
            "b1": np.zeros(self.hidden_dim),
            "w2": np.zeros(self.hidden_dim),
            "b2": np.zeros(1),
        }

    # -- forward ---------------------------------------------------------

    def _inputs(self, features, actions) -> np.ndarray:
        features = np.atleast_2d(np.asarray(features, dtype=float))
        actions = np.atleast_1d(np.asarray(actions, dtype=int))
        if features.shape[1] != self.feature_dim:
            raise ValueError(f"expected {self.feature_dim} features, got {features.shape[1]}")
        if features.shape[0] != actions.shape[0]:
            raise ValueError("features and actions disagree on batch size")
        if np.any((actions < 0) | (actions >= self.n_actions)):
            raise ValueError("action index out of range")
        x = np.zeros((features.shape[0], self.input_dim))
        x[:, : self.feature_dim] = (features - self.feature_offset) / self.feature_scale
        x[np.arange(len(actions)), self.feature_dim + actions] = 1.0
        return x

    def _forward(self, x):
        p = self.params
        h = np.tanh(x @ p["w1"] + p["b1"])
        z = np.clip(h @ p["w2"] + p["b2"][0], -_LOGIT_CLIP, _LOGIT_CLIP)
        return h, z

    def predict(self, features, actions) -> np.ndarray:
        """Vectorised rho_hat for rows of (features, action)."""
        _, z = self._forward(self._inputs(features, actions))
        return _sigmoid(z)

    def predict_all(self, features) -> np.ndarray:
        features = np.asarray(features, dtype=float)
        rows = np.broadcast_to(features, (self.n_actions, features.shape[-1]))
        return self.predict(rows, np.arange(self.n_actions))

    def predict_all_batch(self, features) -> np.ndarray:
        """(N, F) features -> (N, |A|) risks."""
        features = np.atleast_2d(np.asarray(features, dtype=float))
        n = features.shape[0]
        rows = np.repeat(features, self.n_actions, axis=0)
        acts = np.tile(np.arange(self.n_actions), n)
        return self.predict(rows, acts).reshape(n, self.n_actions)

    # -- training --------------------------------------------------------

    def loss_and_grad(self, features, actions, labels):
        """Mean BCE over the batch and its gradient w.r.t. every parameter."""
        x = self._inputs(features, actions)
        y = np.asarray(labels, dtype=float)
        p = self.params
        h = np.tanh(x @ p["w1"] + p["b1"])
        z = h @ p["w2"] + p["b2"][0]
        n = len(y)
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
        dz = (_sigmoid(z) - y) / n
        dh = np.outer(dz, p["w2"]) * (1.0 - h * h)
        grads = {
            "w1": x.T @ dh,
            "b1": dh.sum(axis=0),
            "w2": h.T @ dz,
            "b2": np.array([dz.sum()]),
        }
        return loss, grads

    def update(self, features, actions, labels) -> float:
        """One SGD step on BCE. Returns the batch loss before the step."""
        loss, grads = self.loss_and_grad(features, actions, labels)
        for name, g in grads.items():
            self.params[name] -= self.learning_rate * g
        self.updates_seen += len(np.atleast_1d(labels))
        return loss

    # -- flat views and persistence -------------------------------------

    def get_flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.params.values()])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        i = 0
        for name, v in self.params.items():
            self.params[name] = flat[i : i + v.size].reshape(v.shape).copy()
            i += v.size

    def state_dict(self) -> dict:
        out = {name: v.copy() for name, v in self.params.items()}
        out["feature_offset"] = self.feature_offset.copy()
        out["feature_scale"] = self.feature_scale.copy()
        out["updates_seen"] = np.array([float(self.updates_seen)])
        return out

    def load_state_dict(self, state: dict) -> None:
        for name in self.params:
            if state[name].shape != self.params[name].shape:
                raise ValueError(f"shape mismatch for {name}")
            self.params[name] = np.array(state[name], dtype=float)
        self.feature_offset = np.array(state["feature_offset"], dtype=float)
        self.feature_scale = np.array(state["feature_scale"], dtype=float)
        self.updates_seen = int(state["updates_seen"][0])

    def save(self, path) -> None:
        meta = {
            "feature_dim": self.feature_dim,
            "n_actions": self.n_actions,
            "hidden_dim": self.hidden_dim,
            "learning_rate": self.learning_rate,
        }
        checkpoint.save_arrays(path, self.state_dict(), kind="risk_model", meta=meta)

    @classmethod
    def load(cls, path) -> "RiskModel":
        kind, meta, arrays = checkpoint.load_arrays(path)
        if kind != "risk_model":
            raise ValueError(f"{path} holds a {kind!r} checkpoint")
        model = cls(meta["feature_dim"], meta["n_actions"], meta["hidden_dim"], meta["learning_rate"], init="zeros")
        model.load_state_dict(arrays)
        return model


class ConstantRisk:
    """A pinned predictor returning the same risk for every input."""

    def __init__(self, n_actions: int, value: float):
        if not 0.0 <= value <= 1.0:
            raise ValueError("value must be in [0, 1]")
        self.n_actions = n_actions
        self.value = float(value)
        self.updates_seen = 0

    def predict(self, features, actions):
        return np.full(len(np.atleast_1d(actions)), self.value)

    def predict_all(self, features):
        return np.full(self.n_actions, self.value)

    def predict_all_batch(self, features):
        return np.full((np.atleast_2d(features).shape[0], self.n_actions), self.value)

    def update(self, features, actions, labels) -> float:
        return 0.0


def predict_risk(model: RiskModel, state, action: int) -> float:
    features = getattr(state, "features", state)
    return float(model.predict(np.asarray(features)[None, :], [action])[0])


def predict_all(model: RiskModel, state) -> np.ndarray:
    return model.predict_all(getattr(state, "features", state))


def update_risk_model(model: RiskModel, batch: Sequence[HazardLabel]) -> float | None:
    """One SGD step on the batch. Returns the mean BCE, or None for an empty batch."""
    if len(batch) == 0:
        return None
    features = np.stack([np.asarray(b.window_features, dtype=float) for b in batch])
    actions = np.array([b.action for b in batch])
    labels = np.array([float(b.violated) for b in batch])
    return model.update(features, actions, labels)


def hazard_labels(events: Sequence[bool], horizon: int) -> list[tuple[bool, bool]]:
    """(violated, partial) for each time t that has at least one step of lookahead.

    ``events[s]`` says whether the environment is in violation at time s. The
    label for t is true iff an event happens in (t, t + horizon].
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    events = np.asarray(events, dtype=bool)
    n = len(events)
    out = []
    for t in range(n - 1):
        hi = min(t + horizon, n - 1)
        out.append((bool(events[t + 1 : hi + 1].any()), t + horizon > n - 1))
    return out


def label_transitions(
    episode: EpisodeLog,
    horizon: int,
    violation_predicate: Callable | None = None,
) -> list[HazardLabel]:
    """Horizon-h hazard labels for the steps of an episode.

    With a predicate, it is applied to each record to decide whether the
    environment was in violation at that record's time, and labels exist for
    every step but the last. Without one, each record's outcome flag
    (``violation`` after executing its action) is used, so every step gets a
    label. Steps whose lookahead window runs past the end are flagged partial.
    """
    records = episode.records
    if not records:
        return []
    if violation_predicate is not None:
        events = [bool(violation_predicate(r)) for r in records]
    else:
        events = [False] + [bool(r.violation) for r in records]
    labels = hazard_labels(events, horizon)
    out = []
    for t, (violated, partial) in enumerate(labels):
        r = records[t]
        feats = r.features if r.features is not None else np.atleast_1d(r.observation)
        out.append(HazardLabel(np.asarray(feats, dtype=float), int(r.action), violated, partial))
    return out
