"""Glucose-regulation surrogate with a 3-minute decision interval.

State: plasma glucose G (mg/dL), remote insulin action X (1/min) and gut
glucose D (mg). Dynamics follow the Bergman minimal model with a
one-compartment meal absorption::

    dG/dt = -(p1 + X) G + p1 Gb + D / (tau_meal V_G)
    dX/dt = -p2 X
    dD/dt = -D / tau_meal

A bolus of u units raises X by ``p3 * insulin_gain * u`` (the insulin
excursion above basal, collapsed into an impulse); a meal adds
``carbs * 1000`` mg to D. Integration is fixed-step RK4.
The controller only sees CGM = G + N(0, sd^2), clipped to the sensor range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import EnvStep


@dataclass(frozen=True)
class GlucoseEnvConfig:
    decision_interval: float = 3.0
    substep: float = 1.0
    meal_times: tuple = (480.0, 750.0, 960.0, 1140.0)
    meal_carbs: tuple = (50.0, 70.0, 30.0, 80.0)
    meal_time_jitter: float = 15.0
    meal_carb_jitter: float = 0.1
    g_low: float = 70.0
    g_high: float = 180.0
    cgm_noise_sd: float = 5.0
    cgm_min: float = 40.0
    cgm_max: float = 400.0
    action_grid: tuple = (0.0, 0.5, 1.0, 2.0, 4.0)
    cohort: str = "adult"
    p1: float = 0.028
    p2: float = 0.025
    p3: float = 1.3e-5
    insulin_gain: float = 200.0
    basal_glucose: float = 130.0
    glucose_volume_dl: float = 120.0
    tau_meal: float = 40.0
    patient_variation: float = 0.2
    insulin_action: bool = True
    reward_band: float = 50.0
    episode_days: int = 5

    def __post_init__(self):
        if not self.g_low < self.g_high:
            raise ValueError("g_low must be below g_high")
        grid = list(self.action_grid)
        if not grid or grid[0] != 0.0 or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("action_grid must be strictly ascending and start at 0")
        if self.cohort not in ("adult", "adolescent"):
            raise ValueError("cohort must be 'adult' or 'adolescent'")
        if self.decision_interval <= 0 or self.substep <= 0:
            raise ValueError("time steps must be positive")
        n_sub = self.decision_interval / self.substep
        if abs(n_sub - round(n_sub)) > 1e-9:
            raise ValueError("decision_interval must be a multiple of substep")
        if len(self.meal_times) != len(self.meal_carbs):
            raise ValueError("meal_times and meal_carbs must have equal length")

    @property
    def steps_per_day(self) -> int:
        return int(round(24 * 60 / self.decision_interval))


def glucose_reward(g: float, g_low: float = 70.0, g_high: float = 180.0, band: float = 50.0) -> float:
    """1 inside [g_low, g_high], falling linearly to 0 over ``band`` mg/dL outside."""
    excess = abs(g - min(max(g, g_low), g_high))
    return 1.0 - min(1.0, excess / band)


class GlucoseEnv:
    """One virtual patient. ``reset(seed)`` draws the patient and meal scenario."""

    obs_dim = 1

    def __init__(self, config: GlucoseEnvConfig | None = None, seed: int = 0):
        self.config = config or GlucoseEnvConfig()
        self.n_actions = len(self.config.action_grid)
        self.action_grid = np.asarray(self.config.action_grid, dtype=float)
        self._seed = seed
        self.reset(seed)

    # -- scenario ----------------------------------------------------------

    def _draw_patient(self, rng) -> dict:
        c = self.config
        v = c.patient_variation
        v_sens = v * (1.3 if c.cohort == "adolescent" else 1.0)
        return {
            "p1": c.p1 * rng.uniform(1 - v, 1 + v),
            "p2": c.p2 * rng.uniform(1 - v, 1 + v),
            "p3": c.p3 * rng.uniform(1 - v_sens, 1 + v_sens),
            "Gb": c.basal_glucose,
            "VG": c.glucose_volume_dl,
            "tau": c.tau_meal,
        }

    def _draw_meals(self, rng, days: int) -> list:
        c = self.config
        meals = []
        for day in range(days):
            for t, carbs in zip(c.meal_times, c.meal_carbs):
                jitter = rng.uniform(-c.meal_time_jitter, c.meal_time_jitter) if c.meal_time_jitter else 0.0
                scale = rng.uniform(1 - c.meal_carb_jitter, 1 + c.meal_carb_jitter) if c.meal_carb_jitter else 1.0
                meals.append((day * 1440.0 + t + jitter, carbs * scale))
        return sorted(meals)

    def reset(self, seed: int | None = None, state: np.ndarray | None = None) -> np.ndarray:
        if seed is not None:
            self._seed = seed
        self.rng = np.random.default_rng(self._seed)
        self.patient = self._draw_patient(self.rng)
        self.meals = self._draw_meals(self.rng, max(1, self.config.episode_days) + 1)
        self._meal_idx = 0
        self.time_min = 0.0
        self.step_count = 0
        p = self.patient
        if state is None:
            self.state = np.array([p["Gb"], 0.0, 0.0])
        else:
            self.state = np.asarray(state, dtype=float).copy()
        self.last_cgm = self._cgm()
        return np.array([self.last_cgm])

    def set_meals(self, meals) -> None:
        """Replace the meal scenario with explicit (time_min, carbs) pairs."""
        self.meals = sorted((float(t), float(c)) for t, c in meals)
        self._meal_idx = 0
        while self._meal_idx < len(self.meals) and self.meals[self._meal_idx][0] < self.time_min:
            self._meal_idx += 1

    # -- dynamics ------------------------------------------------------------

    def derivatives(self, y: np.ndarray) -> np.ndarray:
        G, X, D = y
        p = self.patient
        if not self.config.insulin_action:
            X = 0.0
        ra = D / (p["tau"] * p["VG"])
        dG = -(p["p1"] + X) * G + p["p1"] * p["Gb"] + ra
        dX = -p["p2"] * X
        dD = -D / p["tau"]
        return np.array([dG, dX, dD])

    def _rk4(self, y, h):
        k1 = self.derivatives(y)
        k2 = self.derivatives(y + 0.5 * h * k1)
        k3 = self.derivatives(y + 0.5 * h * k2)
        k4 = self.derivatives(y + h * k3)
        return y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    def _cgm(self) -> float:
        c = self.config
        noisy = self.state[0] + (self.rng.normal(0.0, c.cgm_noise_sd) if c.cgm_noise_sd > 0 else 0.0)
        return float(np.clip(noisy, c.cgm_min, c.cgm_max))

    def latent(self) -> dict:
        return {
            "glucose": float(self.state[0]),
            "insulin_action": float(self.state[1]),
            "gut_glucose": float(self.state[2]),
            "time_min": float(self.time_min),
        }

    def step(self, action: int) -> EnvStep:
        c = self.config
        if not isinstance(action, (int, np.integer)) or not 0 <= action < self.n_actions:
            raise ValueError(f"action must be an index into the bolus grid, got {action!r}")
        dose = float(self.action_grid[action])
        p = self.patient
        y = self.state.copy()
        if c.insulin_action:
            y[1] += p["p3"] * c.insulin_gain * dose
        t_end = self.time_min + c.decision_interval
        carbs = 0.0
        while self._meal_idx < len(self.meals) and self.meals[self._meal_idx][0] < t_end:
            carbs += self.meals[self._meal_idx][1]
            self._meal_idx += 1
        y[2] += carbs * 1000.0
        n_sub = int(round(c.decision_interval / c.substep))
        for _ in range(n_sub):
            y = self._rk4(y, c.substep)
        self.state = y
        self.time_min = t_end
        self.step_count += 1
        g = float(y[0])
        violation = g < c.g_low
        self.last_cgm = self._cgm()
        return EnvStep(
            observation=np.array([self.last_cgm]),
            raw_reward=glucose_reward(g, c.g_low, c.g_high, c.reward_band),
            cost=1.0 if violation else 0.0,
            violation=violation,
            terminal=False,
            info={"glucose": g, "dose": dose, "meal_carbs": carbs, "time_min": t_end},
        )


def glucose_step(env: GlucoseEnv, bolus: float) -> EnvStep:
    """Step with a dose given in insulin units; it must lie on the action grid."""
    idx = np.flatnonzero(np.isclose(env.action_grid, bolus))
    if idx.size == 0:
        raise ValueError(f"bolus {bolus} is not on the action grid {tuple(env.action_grid)}")
    return env.step(int(idx[0]))
