from .base import EnvStep, nearest_on_grid
from .glucose import GlucoseEnv, GlucoseEnvConfig, glucose_reward, glucose_step
from .navigation import NavEnvConfig, NavigationEnv, nav_step, ray_circle_distance
from .tabular import TabularPOMDPEnv, TabularPOMDPSpec, tabular_pomdp_spec, tabular_pomdp_step

__all__ = [
    "EnvStep",
    "GlucoseEnv",
    "GlucoseEnvConfig",
    "NavEnvConfig",
    "NavigationEnv",
    "TabularPOMDPEnv",
    "TabularPOMDPSpec",
    "glucose_reward",
    "glucose_step",
    "nav_step",
    "nearest_on_grid",
    "ray_circle_distance",
    "tabular_pomdp_spec",
    "tabular_pomdp_step",
]
