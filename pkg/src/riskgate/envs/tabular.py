"""A six-state POMDP small enough to solve exactly.

Latent state s = (g, d) with level g in {0: low, 1: normal, 2: high} and
d = 1 if the previous action was at least 1 (a "dose on board" flag),
indexed as s = 2g + d. The next level depends on (d, a) only, and d' is a
deterministic function of a. Being in level 0 is the unsafe event, and it
also pays the most reward, so an unconstrained policy is drawn towards it.
Every action's risk is either at most 0.10 or 0.85.

Because d_t is fixed by a_{t-1} and the distribution of g_t by
(a_{t-2}, a_{t-1}), the belief after any history of length >= 2 is a
function of the last three (observation, action) pairs. Beliefs therefore
form a finite set and value iteration over them is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import EnvStep

# level transition G[d, a, g'] (rows sum to 1)
_LEVEL_T = np.array([
    [[0.00, 0.30, 0.70], [0.05, 0.65, 0.30], [0.10, 0.70, 0.20]],
    [[0.05, 0.60, 0.35], [0.10, 0.70, 0.20], [0.85, 0.15, 0.00]],
])
_LEVEL_OBS = np.array([
    [0.90, 0.10, 0.00, 0.00],
    [0.05, 0.60, 0.35, 0.00],
    [0.00, 0.00, 0.30, 0.70],
])
_LEVEL_REWARD = np.array([1.2, 1.0, 0.2])
_ACTION_COST = 0.05


@dataclass(frozen=True)
class TabularPOMDPSpec:
    T: np.ndarray  # (S, A, S)
    Omega: np.ndarray  # (S, O)
    R: np.ndarray  # (S, A)
    unsafe: np.ndarray  # (S,) bool
    b0: np.ndarray  # (S,)

    @property
    def n_states(self) -> int:
        return self.T.shape[0]

    @property
    def n_actions(self) -> int:
        return self.T.shape[1]

    @property
    def n_obs(self) -> int:
        return self.Omega.shape[1]

    def true_risk(self, belief) -> np.ndarray:
        """P(next state unsafe | belief, a) for every action."""
        return np.einsum("s,sat,t->a", np.asarray(belief, float), self.T, self.unsafe.astype(float))

    def permute_actions(self, perm) -> "TabularPOMDPSpec":
        """Same model with action i relabelled as ``perm[i]``-th original action."""
        perm = np.asarray(perm)
        return TabularPOMDPSpec(self.T[:, perm, :].copy(), self.Omega, self.R[:, perm].copy(), self.unsafe, self.b0)


def tabular_pomdp_spec() -> TabularPOMDPSpec:
    n_s, n_a = 6, 3
    T = np.zeros((n_s, n_a, n_s))
    Omega = np.zeros((n_s, _LEVEL_OBS.shape[1]))
    R = np.zeros((n_s, n_a))
    for g in range(3):
        for d in range(2):
            s = 2 * g + d
            Omega[s] = _LEVEL_OBS[g]
            for a in range(n_a):
                d_next = int(a >= 1)
                for g_next in range(3):
                    T[s, a, 2 * g_next + d_next] = _LEVEL_T[d, a, g_next]
                R[s, a] = _LEVEL_REWARD[g] - _ACTION_COST * a
    unsafe = np.array([s // 2 == 0 for s in range(n_s)])
    b0 = np.zeros(n_s)
    b0[[0, 2, 4]] = [0.1, 0.6, 0.3]
    return TabularPOMDPSpec(T, Omega, R, unsafe, b0)


class TabularPOMDPEnv:
    """Sampler for a TabularPOMDPSpec. Observations are one-hot vectors."""

    def __init__(self, spec: TabularPOMDPSpec | None = None, seed: int = 0, episode_len: int = 200):
        self.spec = spec or tabular_pomdp_spec()
        self.n_actions = self.spec.n_actions
        self.obs_dim = self.spec.n_obs
        self.episode_len = episode_len
        self._seed = seed
        self.reset(seed)

    def _obs(self) -> np.ndarray:
        y = int(self.rng.choice(self.spec.n_obs, p=self.spec.Omega[self.state]))
        self.last_obs_index = y
        out = np.zeros(self.spec.n_obs)
        out[y] = 1.0
        return out

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._seed = seed
        self.rng = np.random.default_rng(self._seed)
        self.state = int(self.rng.choice(self.spec.n_states, p=self.spec.b0))
        self.step_count = 0
        return self._obs()

    def latent(self) -> dict:
        return {"state": float(self.state)}

    def step(self, action: int) -> EnvStep:
        if not isinstance(action, (int, np.integer)) or not 0 <= action < self.n_actions:
            raise ValueError(f"invalid action {action!r}")
        reward = float(self.spec.R[self.state, action])
        self.state = int(self.rng.choice(self.spec.n_states, p=self.spec.T[self.state, action]))
        violation = bool(self.spec.unsafe[self.state])
        self.step_count += 1
        return EnvStep(
            observation=self._obs(),
            raw_reward=reward,
            cost=1.0 if violation else 0.0,
            violation=violation,
            terminal=False,
            info={"state": self.state, "truncated": self.step_count >= self.episode_len},
        )


def tabular_pomdp_step(env: TabularPOMDPEnv, action: int) -> EnvStep:
    return env.step(action)
