from __future__ import annotations

import pytest

from riskgate import config as C


def test_env_defaults_then_preset_then_user():
    cfg = C.resolve({"experiment.env": "navigation", "experiment.algorithm": "unconstrained_q",
                     "gate.window_len": "6"})
    assert cfg["gate.r_max"] == 1.0 and cfg["gate.ensemble_size"] == 1
    assert cfg["agent.risk_horizon"] == 2 and cfg["gate.window_len"] == 6


def test_unknown_keys_are_all_reported():
    with pytest.raises(C.ConfigError) as err:
        C.resolve({"gate.rmax": "0.1", "agent.bogus": "1"})
    assert err.value.unknown == ["agent.bogus", "gate.rmax"]


@pytest.mark.parametrize("raw", [
    {"experiment.env": "atari"},
    {"experiment.algorithm": "ppo"},
    {"gate.r_max": "high"},
    {"gate.r_max": "1.5"},
    {"agent.epsilon": "2"},
])
def test_bad_values_raise_config_error(raw):
    with pytest.raises(C.ConfigError):
        C.resolve(raw)


def test_file_format_sections_comments_and_tuples(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text(
        "# navigation run\n"
        "experiment.env = navigation\n"
        "[gate]\n"
        "r_max = 0.1   # tighter\n"
        "gate.window_len = 3\n"
        "[glucose]\n"
        "meal_times = 480, 750\n"
    )
    cfg = C.load_config(path, ["experiment.seed=7"])
    assert cfg["gate.r_max"] == 0.1 and cfg["gate.window_len"] == 3
    assert cfg["glucose.meal_times"] == (480.0, 750.0) and cfg["experiment.seed"] == 7


def test_bool_parsing():
    assert C.resolve({"agent.shield_enabled": "off"})["agent.shield_enabled"] is False
    assert C.resolve({"agent.shield_enabled": "yes"})["agent.shield_enabled"] is True


def test_sentinels_map_to_none():
    cfg = C.resolve({"experiment.env": "glucose"})
    assert C.build_agent_config(cfg).learning_starts is None
    assert C.build_agent_config(C.resolve({"agent.pinned_risk": "0.3"})).pinned_risk == 0.3


def test_hash_is_stable_and_sensitive():
    a = C.resolve({"experiment.env": "tabular"})
    assert C.config_hash(a) == C.config_hash(C.resolve({"experiment.env": "tabular"}))
    assert C.config_hash(a) != C.config_hash(C.resolve({"experiment.env": "tabular", "experiment.seed": "1"}))


def test_manifest_roundtrip(tmp_path):
    import json

    cfg = C.resolve({"experiment.env": "glucose", "gate.r_max": "0.1"})
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"config": C.to_jsonable(cfg)}))
    assert C.load_config(path) == cfg


def test_text_dump_roundtrip(tmp_path):
    cfg = C.resolve({"experiment.env": "navigation", "nav.lidar_bins": "16"})
    path = tmp_path / "config.txt"
    path.write_text(C.dump_config_text(cfg))
    assert C.load_config(path) == cfg


def test_explicit_settings_let_presets_apply():
    base = C.resolve({"experiment.env": "navigation", "gate.window_len": "3"})
    raw = C.explicit_settings(base)
    assert raw == {"experiment.env": "navigation", "experiment.algorithm": "riskgated", "gate.window_len": 3}
    raw["experiment.algorithm"] = "penalty_only"
    cfg = C.resolve(raw)
    assert cfg["gate.r_max"] == 1.0 and cfg["gate.window_len"] == 3
