"""Bounded FIFO transition store with seeded uniform sampling."""

from __future__ import annotations

import csv

import numpy as np

from .critics import Transition, TransitionBatch

CSV_HEADER = [
    "index", "action", "raw_reward", "shaped_reward", "cost", "violation", "hazard",
    "predicted_risk", "terminal", "weight", "features", "next_features", "next_risks",
]

_SCALARS = {
    "action": int,
    "raw_reward": float,
    "shaped_reward": float,
    "cost": float,
    "violation": bool,
    "hazard": bool,
    "predicted_risk_at_selection": float,
    "terminal": bool,
    "weight": float,
}
_VECTORS = ("proxy_features", "next_proxy_features", "next_risk_vector")


class ReplayBuffer:
    """Ring buffer backed by column arrays.

    Columns are allocated on first push and grown geometrically up to
    ``capacity``, so a large capacity costs nothing until it is used.
    Everything handed out is a copy.
    """

    def __init__(self, capacity: int = 100_000, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.rng = np.random.default_rng(seed)
        self._cols: dict | None = None
        self._alloc = 0
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def _allocate(self, t: Transition, n: int) -> None:
        cols = {}
        for name, kind in _SCALARS.items():
            cols[name] = np.zeros(n, dtype=np.int64 if kind is int else (bool if kind is bool else float))
        for name in _VECTORS:
            cols[name] = np.zeros((n, len(getattr(t, name))))
        if self._cols is not None:
            for name, arr in self._cols.items():
                cols[name][: self._alloc] = arr
        self._cols = cols
        self._alloc = n

    def push(self, t: Transition) -> None:
        if self._cols is None:
            self._allocate(t, min(self.capacity, 1024))
        if self._size < self.capacity:
            if self._size == self._alloc:
                self._allocate(t, min(self.capacity, 2 * self._alloc))
            i = self._size
            self._size += 1
            self._next = self._size % self.capacity
        else:
            i = self._next
            self._next = (i + 1) % self.capacity
        for name in _SCALARS:
            self._cols[name][i] = getattr(t, name)
        for name in _VECTORS:
            self._cols[name][i] = np.asarray(getattr(t, name), dtype=float)

    def _indices(self, k: int) -> np.ndarray:
        if self._size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        return self.rng.integers(0, self._size, size=k)

    def _order(self) -> np.ndarray:
        """Slot indices from oldest to newest."""
        if self._size < self.capacity:
            return np.arange(self._size)
        return (np.arange(self._size) + self._next) % self.capacity

    def _transition(self, i: int) -> Transition:
        c = self._cols
        return Transition(
            proxy_features=c["proxy_features"][i].copy(),
            action=int(c["action"][i]),
            shaped_reward=float(c["shaped_reward"][i]),
            raw_reward=float(c["raw_reward"][i]),
            cost=float(c["cost"][i]),
            violation=bool(c["violation"][i]),
            predicted_risk_at_selection=float(c["predicted_risk_at_selection"][i]),
            next_proxy_features=c["next_proxy_features"][i].copy(),
            next_risk_vector=c["next_risk_vector"][i].copy(),
            terminal=bool(c["terminal"][i]),
            hazard=bool(c["hazard"][i]),
            weight=float(c["weight"][i]),
        )

    def sample(self, k: int) -> list[Transition]:
        """k uniform draws with replacement."""
        return [self._transition(i) for i in self._indices(k)]

    def sample_batch(self, k: int) -> TransitionBatch:
        idx = self._indices(k)
        c = self._cols
        return TransitionBatch(
            features=c["proxy_features"][idx],
            actions=c["action"][idx].astype(int),
            shaped_rewards=c["shaped_reward"][idx],
            risks=c["predicted_risk_at_selection"][idx],
            next_features=c["next_proxy_features"][idx],
            next_risks=c["next_risk_vector"][idx],
            terminals=c["terminal"][idx],
            weights=c["weight"][idx],
            hazards=c["hazard"][idx],
        )

    def transitions(self) -> list[Transition]:
        """All stored transitions, oldest first."""
        return [self._transition(i) for i in self._order()]

    def to_csv(self, path) -> None:
        """One transition per row; vector fields are space-separated."""
        def vec(a):
            return " ".join(repr(float(x)) for x in a)

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for n, t in enumerate(self.transitions()):
                writer.writerow([
                    n, t.action, repr(t.raw_reward), repr(t.shaped_reward), repr(t.cost),
                    int(t.violation), int(t.hazard), repr(t.predicted_risk_at_selection),
                    int(t.terminal), repr(t.weight), vec(t.proxy_features),
                    vec(t.next_proxy_features), vec(t.next_risk_vector),
                ])


def push(buffer: ReplayBuffer, t: Transition) -> None:
    buffer.push(t)


def sample(buffer: ReplayBuffer, k: int) -> list[Transition]:
    return buffer.sample(k)
