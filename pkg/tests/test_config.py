import json

import pytest

from splatmotion import config


def test_presets_load_and_validate():
    for name in config.PRESETS:
        cfg = config.preset(name)
        assert cfg.data["preset"] == name
        cfg.weights(), cfg.optim(), cfg.scene_spec()


def test_desk_defaults():
    cfg = config.preset("default")
    w = cfg.weights()
    assert (w.num_bases, w.lambda_rigid, w.knn_k) == (20, 1e-3, 8)
    assert config.preset("full").weights().num_bases == 100


def test_unknown_key_is_named():
    with pytest.raises(config.ConfigError, match="weights.foo"):
        config.from_dict({"weights": {"foo": 1}})
    with pytest.raises(config.ConfigError, match="scene.occluders\\[0\\].colour"):
        config.from_dict({"scene": {"occluders": [{"colour": 1}]}})


def test_type_and_value_errors():
    with pytest.raises(config.ConfigError, match="integer"):
        config.from_dict({"seed": 1.5})
    with pytest.raises(config.ConfigError, match="invalid config value"):
        config.from_dict({"weights": {"lambda_rigid": -1.0}})
    with pytest.raises(config.ConfigError, match="num_pairs"):
        config.from_dict({"variance": {"num_pairs": 5}})
    with pytest.raises(config.ConfigError, match="gamma"):
        config.from_dict({"metrics": {"gamma": -0.5}})


def test_file_overrides_start_from_named_preset(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"preset": "smoke", "optim": {"epochs_init": 7}}))
    cfg = config.load(str(p))
    assert cfg.optim().epochs_init == 7
    assert cfg.weights().num_bases == 4


def test_resolved_config_reloads_identically(tmp_path):
    cfg = config.preset("benchmark").with_seed(11)
    p = tmp_path / "resolved.json"
    p.write_text(cfg.to_json())
    again = config.load(str(p))
    assert again.to_json() == cfg.to_json()
    assert again.seed == 11


def test_missing_file_and_bad_json(tmp_path):
    with pytest.raises(config.ConfigError, match="neither a preset"):
        config.load(str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(config.ConfigError, match="invalid JSON"):
        config.load(str(bad))
