"""Flat experiment configuration: dotted keys, typed by their defaults.

File format, one setting per line::

    # comment
    experiment.env = navigation
    [gate]
    r_max = 0.1          # inside a section, keys are prefixed with it
    glucose.meal_times = 480, 750, 960, 1140

Values are parsed according to the type of the key's default. Unknown keys
are errors, listed all at once. Resolution order: environment defaults,
then the algorithm preset, then the file, then command-line overrides.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .agent import AgentConfig, ShieldConfig, TeacherConfig
from .core import GateConfig
from .envs.glucose import GlucoseEnvConfig
from .envs.navigation import NavEnvConfig

ENVS = ("glucose", "navigation", "tabular")
ALGORITHMS = ("riskgated", "unconstrained_q", "penalty_only", "shielded_only", "teacher", "random")


class ConfigError(ValueError):
    """Bad key or value. ``unknown`` lists every unrecognised key."""

    def __init__(self, message: str, unknown=()):
        super().__init__(message)
        self.unknown = list(unknown)


def _dataclass_defaults(prefix: str, obj, skip=()) -> dict:
    return {f"{prefix}.{k}": v for k, v in vars(obj).items() if k not in skip}


def base_defaults() -> dict:
    d = {
        "experiment.env": "glucose",
        "experiment.algorithm": "riskgated",
        "experiment.seed": 42,
        "experiment.train_days": 3,
        "experiment.eval_days": 2,
        "experiment.train_episodes": 12,
        "experiment.eval_episodes": 3,
        "experiment.episode_len": 1000,
        "experiment.learn_during_eval": True,
        "experiment.reference_reward": 0.0,
        "experiment.save_replay": False,
        "features.iob_decay": 0.5,
    }
    d.update(_dataclass_defaults("gate", GateConfig()))
    d.update(_dataclass_defaults("agent", AgentConfig(), skip=("gate",)))
    d["agent.learning_starts"] = -1
    d["agent.pinned_risk"] = -1.0
    d.update(_dataclass_defaults("glucose", GlucoseEnvConfig()))
    d.update(_dataclass_defaults("nav", NavEnvConfig(), skip=("hazard_circles",)))
    d.update(_dataclass_defaults("teacher", TeacherConfig()))
    d.update(_dataclass_defaults("shield", ShieldConfig()))
    return d


# Per-environment settings layered over base_defaults.
ENV_DEFAULTS = {
    "glucose": {
        "gate.window_len": 8, "gate.r_max": 0.25, "gate.lambda_risk": 0.1, "gate.ensemble_size": 5,
        "agent.warmup_steps": 480, "agent.shield_enabled": True,
        "experiment.learn_during_eval": True,
    },
    "navigation": {
        "gate.window_len": 4, "gate.r_max": 0.25, "gate.lambda_risk": 0.1, "gate.ensemble_size": 5,
        "agent.risk_horizon": 2, "agent.epsilon": 0.1, "agent.learning_starts": 500,
        "experiment.learn_during_eval": False,
    },
    "tabular": {
        "gate.window_len": 2, "gate.r_max": 0.45, "gate.lambda_risk": 0.0, "gate.ensemble_size": 1,
        "agent.critic_hidden": 0, "agent.epsilon": 0.1, "agent.learning_starts": 100,
        "experiment.train_episodes": 20, "experiment.eval_episodes": 3, "experiment.episode_len": 200,
        "experiment.learn_during_eval": False,
    },
}

# Settings that define a baseline, applied over the environment defaults.
ALGORITHM_PRESETS = {
    "riskgated": {},
    "unconstrained_q": {"gate.r_max": 1.0, "gate.lambda_risk": 0.0, "gate.ensemble_size": 1,
                        "agent.shield_enabled": False},
    "penalty_only": {"gate.r_max": 1.0, "gate.ensemble_size": 1, "agent.shield_enabled": False},
    "shielded_only": {"gate.r_max": 1.0, "gate.lambda_risk": 0.0, "gate.ensemble_size": 1,
                      "agent.shield_enabled": True},
    "teacher": {"agent.policy": "teacher", "agent.shield_enabled": False},
    "random": {"agent.policy": "random", "agent.shield_enabled": False},
}


def _parse_value(key: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(p.strip()) for p in parts)
        if default is None:
            return None if text.lower() in ("none", "") else float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None


def parse_config_text(text: str) -> dict:
    """Raw key -> string pairs from the flat format."""
    out, section = {}, ""
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if section and not key.startswith(section + "."):
            key = f"{section}.{key}"
        out[key] = value
    return out


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve(raw: dict) -> dict:
    """Typed, complete configuration from user-supplied settings.

    Args:
        raw: key -> value, where values may be strings (from files or the
            command line) or already-typed Python values (from a manifest).
    """
    defaults = base_defaults()
    unknown = sorted(k for k in raw if k not in defaults)
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(unknown), unknown)
    env = str(raw.get("experiment.env", defaults["experiment.env"]))
    algo = str(raw.get("experiment.algorithm", defaults["experiment.algorithm"]))
    if env not in ENVS:
        raise ConfigError(f"experiment.env must be one of {ENVS}, got {env!r}")
    if algo not in ALGORITHMS:
        raise ConfigError(f"experiment.algorithm must be one of {ALGORITHMS}, got {algo!r}")
    cfg = dict(defaults)
    cfg.update(ENV_DEFAULTS[env])
    cfg.update(ALGORITHM_PRESETS[algo])
    for k, v in raw.items():
        if isinstance(v, str):
            v = _parse_value(k, v, defaults[k])
        elif isinstance(v, list):
            v = tuple(v)
        cfg[k] = v
    build_gate(cfg)
    build_agent_config(cfg)
    build_env_config(cfg)
    return cfg


def explicit_settings(cfg: dict) -> dict:
    """Entries of a resolved config that differ from its environment and algorithm defaults.

    Layering new settings over these, rather than over the full config, lets
    a different algorithm preset take effect.
    """
    keys = ("experiment.env", "experiment.algorithm")
    implied = resolve({k: cfg[k] for k in keys})
    out = {k: v for k, v in cfg.items() if implied.get(k) != v}
    out.update({k: cfg[k] for k in keys})
    return out


def load_config(path=None, overrides=None) -> dict:
    """Resolve a config file (flat text, or a run manifest JSON) plus overrides."""
    raw = {}
    if path is not None:
        text = Path(path).read_text()
        if str(path).endswith(".json"):
            data = json.loads(text)
            raw.update(data.get("config", data))
        else:
            raw.update(parse_config_text(text))
    raw.update(parse_overrides(overrides) if not isinstance(overrides, dict) else overrides)
    return resolve(raw)


def _section(cfg: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def build_gate(cfg: dict) -> GateConfig:
    try:
        return GateConfig(**_section(cfg, "gate"))
    except ValueError as e:
        raise ConfigError(str(e)) from None


def build_agent_config(cfg: dict) -> AgentConfig:
    kw = _section(cfg, "agent")
    kw["learning_starts"] = None if kw["learning_starts"] < 0 else int(kw["learning_starts"])
    kw["pinned_risk"] = None if kw["pinned_risk"] < 0 else float(kw["pinned_risk"])
    kw["seed"] = int(cfg["experiment.seed"])
    try:
        return AgentConfig(gate=build_gate(cfg), **kw)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def build_env_config(cfg: dict):
    env = cfg["experiment.env"]
    try:
        if env == "glucose":
            return GlucoseEnvConfig(**_section(cfg, "glucose"))
        if env == "navigation":
            return NavEnvConfig(**{**_section(cfg, "nav"), "episode_len": int(cfg["experiment.episode_len"])})
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return None


def to_jsonable(cfg: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(cfg.items())}


def config_hash(cfg: dict) -> str:
    blob = json.dumps(to_jsonable(cfg), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def dump_config_text(cfg: dict) -> str:
    lines = []
    for k, v in sorted(cfg.items()):
        if isinstance(v, tuple):
            v = ", ".join(repr(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
