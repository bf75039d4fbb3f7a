"""Point robot in a walled arena with circular hazards and a relocating goal.

The robot sees only egocentric lidar: one set of bins for hazards, one for
the goal direction, plus its current speed. It never sees coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import EnvStep


@dataclass(frozen=True)
class NavEnvConfig:
    arena_half_width: float = 5.0
    n_hazards: int = 6
    hazard_radius: float = 0.8
    hazard_circles: tuple | None = None
    goal_radius: float = 0.4
    speed: float = 0.15
    turn_step: float = np.pi / 8
    turns: tuple = (-1.0, 0.0, 1.0)
    thrusts: tuple = (0.0, 0.5, 1.0)
    lidar_bins: int = 8
    lidar_range: float = 3.0
    goal_bonus: float = 1.0
    step_cost_on_hazard: float = 1.0
    episode_len: int = 1000
    cost_limit_reference: float = 25.0

    def __post_init__(self):
        if self.lidar_bins < 4:
            raise ValueError("lidar_bins must be >= 4")
        if self.arena_half_width <= 0 or self.speed <= 0:
            raise ValueError("arena_half_width and speed must be positive")
        if self.hazard_circles is not None:
            for (cx, cy), r in self.hazard_circles:
                if max(abs(cx), abs(cy)) + r > self.arena_half_width:
                    raise ValueError("hazard circles must lie inside the arena")

    @property
    def action_grid(self) -> list[tuple[float, float]]:
        return [(turn, thrust) for turn in self.turns for thrust in self.thrusts]

    @property
    def goal_range(self) -> float:
        return 2.0 * np.sqrt(2.0) * self.arena_half_width


def ray_circle_distance(origin, direction, center, radius) -> float:
    """Distance along a unit ray to a circle; inf on a miss, 0 if starting inside."""
    p = np.asarray(center, float) - np.asarray(origin, float)
    dist2 = float(p @ p)
    if dist2 <= radius * radius:
        return 0.0
    proj = float(p @ direction)
    if proj <= 0.0:
        return np.inf
    perp2 = dist2 - proj * proj
    if perp2 > radius * radius:
        return np.inf
    return proj - np.sqrt(radius * radius - perp2)


class NavigationEnv:
    def __init__(self, config: NavEnvConfig | None = None, seed: int = 0):
        self.config = config or NavEnvConfig()
        self.actions = self.config.action_grid
        self.n_actions = len(self.actions)
        self.obs_dim = 2 * self.config.lidar_bins + 1
        self._seed = seed
        self.reset(seed)

    # -- layout ------------------------------------------------------------

    def _free_point(self, margin: float) -> np.ndarray:
        L = self.config.arena_half_width - margin
        for _ in range(10_000):
            pt = self.rng.uniform(-L, L, size=2)
            if all(np.hypot(*(pt - c)) > r + margin for c, r in self.hazards):
                return pt
        raise RuntimeError("could not place a point outside the hazards")

    def _draw_hazards(self) -> list:
        c = self.config
        if c.hazard_circles is not None:
            return [(np.asarray(ctr, float), float(r)) for ctr, r in c.hazard_circles]
        out = []
        L = c.arena_half_width - c.hazard_radius
        while len(out) < c.n_hazards:
            ctr = self.rng.uniform(-L, L, size=2)
            if all(np.hypot(*(ctr - o)) > 2 * c.hazard_radius + 0.2 for o, _ in out):
                out.append((ctr, c.hazard_radius))
        return out

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._seed = seed
        self.rng = np.random.default_rng(self._seed)
        self.hazards = self._draw_hazards()
        self.pos = self._free_point(0.3)
        self.goal = self._place_goal()
        self.heading = float(self.rng.uniform(-np.pi, np.pi))
        self.last_thrust = 0.0
        self.step_count = 0
        self.goals_reached = 0
        return self.observe()

    def _place_goal(self) -> np.ndarray:
        c = self.config
        for _ in range(10_000):
            g = self._free_point(c.goal_radius + 0.1)
            if np.hypot(*(g - self.pos)) > 2.0:
                return g
        return self._free_point(c.goal_radius + 0.1)

    def place(self, pos, heading: float, goal=None) -> np.ndarray:
        """Put the robot (and optionally the goal) at explicit coordinates."""
        self.pos = np.asarray(pos, float).copy()
        self.heading = float(heading)
        if goal is not None:
            self.goal = np.asarray(goal, float).copy()
        return self.observe()

    # -- sensing -------------------------------------------------------------

    def _bearing_bins(self, target, magnitude: float) -> np.ndarray:
        """Spread ``magnitude`` over the two bins nearest the bearing to ``target``."""
        n = self.config.lidar_bins
        delta = np.asarray(target, float) - self.pos
        bearing = (np.arctan2(delta[1], delta[0]) - self.heading) % (2 * np.pi)
        pos = bearing / (2 * np.pi / n)
        lo = int(np.floor(pos)) % n
        frac = pos - np.floor(pos)
        out = np.zeros(n)
        out[lo] += (1.0 - frac) * magnitude
        out[(lo + 1) % n] += frac * magnitude
        return out

    def hazard_lidar(self) -> np.ndarray:
        """Per bin, the closest hazard whose centre lies in that direction.

        A hazard at surface distance d contributes 1 - d / lidar_range, split
        between the two bins adjacent to the bearing of its centre; bins keep
        the max over hazards. Inside a hazard d = 0, so the saturated bins
        point at its centre and the way out is the opposite direction.
        """
        c = self.config
        out = np.zeros(c.lidar_bins)
        for ctr, r in self.hazards:
            d = max(0.0, float(np.hypot(*(ctr - self.pos))) - r)
            if d < c.lidar_range:
                out = np.maximum(out, self._bearing_bins(ctr, 1.0 - d / c.lidar_range))
        return out

    def goal_lidar(self) -> np.ndarray:
        """Bearing split linearly between the two nearest bins, scaled by closeness."""
        mag = max(0.0, 1.0 - self.goal_distance() / self.config.goal_range)
        return self._bearing_bins(self.goal, mag)

    def observe(self) -> np.ndarray:
        return np.concatenate([self.hazard_lidar(), self.goal_lidar(), [self.last_thrust]])

    def in_hazard(self, pos=None) -> bool:
        pos = self.pos if pos is None else pos
        return any(np.hypot(*(pos - ctr)) < r for ctr, r in self.hazards)

    def goal_distance(self) -> float:
        return float(np.hypot(*(self.goal - self.pos)))

    def latent(self) -> dict:
        return {
            "x": float(self.pos[0]),
            "y": float(self.pos[1]),
            "heading": self.heading,
            "goal_distance": self.goal_distance(),
        }

    # -- dynamics ------------------------------------------------------------

    def step(self, action: int) -> EnvStep:
        c = self.config
        if not isinstance(action, (int, np.integer)) or not 0 <= action < self.n_actions:
            raise ValueError(f"action must be an index into the (turn, thrust) grid, got {action!r}")
        turn, thrust = self.actions[action]
        before = self.goal_distance()
        self.heading = float((self.heading + turn * c.turn_step + np.pi) % (2 * np.pi) - np.pi)
        step = thrust * c.speed * np.array([np.cos(self.heading), np.sin(self.heading)])
        pos = self.pos + step
        L = c.arena_half_width
        hx, hy = np.cos(self.heading), np.sin(self.heading)
        if abs(pos[0]) > L:
            pos[0] = np.sign(pos[0]) * (2 * L - abs(pos[0]))
            hx = -hx
        if abs(pos[1]) > L:
            pos[1] = np.sign(pos[1]) * (2 * L - abs(pos[1]))
            hy = -hy
        self.heading = float(np.arctan2(hy, hx))
        self.pos = pos
        self.last_thrust = float(thrust)
        after = self.goal_distance()
        reward = before - after
        reached = after <= c.goal_radius
        if reached:
            reward += c.goal_bonus
            self.goals_reached += 1
            self.goal = self._place_goal()
        violation = self.in_hazard()
        self.step_count += 1
        return EnvStep(
            observation=self.observe(),
            raw_reward=float(reward),
            cost=c.step_cost_on_hazard if violation else 0.0,
            violation=violation,
            terminal=False,
            info={"goal_reached": reached, "progress": before - after, "segment_end_distance": after,
                  "truncated": self.step_count >= c.episode_len},
        )


def nav_step(env: NavigationEnv, action: int) -> EnvStep:
    return env.step(action)
