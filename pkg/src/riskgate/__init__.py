"""Risk-gated ensemble Q-learning on proxy states for partially observable control."""

from .core import GateConfig, evaluate, gate_values, select_action, shaped_reward

__version__ = "0.1.0"

__all__ = ["GateConfig", "evaluate", "gate_values", "select_action", "shaped_reward", "__version__"]
