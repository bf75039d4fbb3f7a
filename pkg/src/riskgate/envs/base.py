from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class EnvStep:
    observation: np.ndarray
    raw_reward: float
    cost: float
    violation: bool
    terminal: bool = False
    info: dict = field(default_factory=dict)


def nearest_on_grid(value: float, grid) -> int:
    """Index of the grid point closest to ``value`` (lower index on ties)."""
    grid = np.asarray(grid, dtype=float)
    return int(np.argmin(np.abs(grid - value)))
