"""Time-indexed episode traces and their CSV form.

CSV columns, in order:
    t, obs_0..obs_{k-1}, action, source, reward, shaped_reward, cost, violation,
    predicted_risk, fallback, shield, risk_0..risk_{A-1}, qgate_0..qgate_{A-1},
    latent_<name>... (sorted by name)

``reward``, ``cost`` and ``violation`` are the outcome of executing ``action``
at time t; ``latent_*`` describe the environment at time t, before acting.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class StepRecord:
    t: int
    observation: np.ndarray
    action: int
    reward: float
    cost: float
    violation: bool
    shaped_reward: float = 0.0
    risks: np.ndarray | None = None
    q_gate: np.ndarray | None = None
    fallback: bool = False
    shield: bool = False
    source: str = "agent"
    latent: dict = field(default_factory=dict)
    features: np.ndarray | None = None

    @property
    def predicted_risk(self) -> float:
        if self.risks is None:
            return float("nan")
        return float(self.risks[self.action])


@dataclass
class EpisodeLog:
    records: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: StepRecord) -> None:
        self.records.append(record)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def latent(self, key: str) -> np.ndarray:
        return np.array([r.latent[key] for r in self.records], dtype=float)

    @property
    def total_reward(self) -> float:
        return float(sum(r.reward for r in self.records))

    @property
    def total_cost(self) -> float:
        return float(sum(r.cost for r in self.records))

    def to_csv(self, path) -> None:
        if not self.records:
            Path(path).write_text("t\n")
            return
        first = self.records[0]
        n_obs = len(np.atleast_1d(first.observation))
        n_act = 0 if first.risks is None else len(first.risks)
        latent_keys = sorted(first.latent)
        header = (
            ["t"]
            + [f"obs_{i}" for i in range(n_obs)]
            + ["action", "source", "reward", "shaped_reward", "cost", "violation",
               "predicted_risk", "fallback", "shield"]
            + [f"risk_{i}" for i in range(n_act)]
            + [f"qgate_{i}" for i in range(n_act)]
            + [f"latent_{k}" for k in latent_keys]
        )
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for r in self.records:
                risks = [] if r.risks is None else [repr(float(x)) for x in r.risks]
                qg = [] if r.q_gate is None else [repr(float(x)) for x in r.q_gate]
                if n_act and not qg:
                    qg = ["nan"] * n_act
                writer.writerow(
                    [r.t]
                    + [repr(float(x)) for x in np.atleast_1d(r.observation)]
                    + [r.action, r.source, repr(float(r.reward)), repr(float(r.shaped_reward)),
                       repr(float(r.cost)), int(bool(r.violation)), repr(r.predicted_risk),
                       int(bool(r.fallback)), int(bool(r.shield))]
                    + risks
                    + qg
                    + [repr(float(r.latent[k])) for k in latent_keys]
                )

    @classmethod
    def from_csv(cls, path) -> "EpisodeLog":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        log = cls()
        if not rows:
            return log
        keys = list(rows[0].keys())
        obs_keys = [k for k in keys if k.startswith("obs_")]
        risk_keys = [k for k in keys if k.startswith("risk_")]
        q_keys = [k for k in keys if k.startswith("qgate_")]
        latent_keys = [k for k in keys if k.startswith("latent_")]
        for row in rows:
            log.append(
                StepRecord(
                    t=int(row["t"]),
                    observation=np.array([float(row[k]) for k in obs_keys]),
                    action=int(row["action"]),
                    reward=float(row["reward"]),
                    cost=float(row["cost"]),
                    violation=bool(int(row["violation"])),
                    shaped_reward=float(row["shaped_reward"]),
                    risks=np.array([float(row[k]) for k in risk_keys]) if risk_keys else None,
                    q_gate=np.array([float(row[k]) for k in q_keys]) if q_keys else None,
                    fallback=bool(int(row["fallback"])),
                    shield=bool(int(row["shield"])),
                    source=row["source"],
                    latent={k[len("latent_"):]: float(row[k]) for k in latent_keys},
                )
            )
        return log
