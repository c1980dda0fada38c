import json

import pytest

from skelgen.config import KEYS, ConfigError, read_config_file, resolve_config


def test_defaults():
    cfg = resolve_config(environ={})
    assert set(cfg) == set(KEYS)
    assert cfg["data.F"] == 56 and cfg["data.F_past"] == 8
    assert cfg["diffusion.train_steps"] == 50 and cfg["diffusion.infer_steps"] == 4
    assert cfg["diffusion.cfg_scale"] == 2.5
    assert cfg["optim.lr"] == 1e-4 and cfg["optim.gamma"] == 0.9999
    assert cfg["model.p_drop_style"] == 0.1 and cfg["model.p_drop_past"] == 0.5
    assert cfg.section("loss") == {"w_d": 1.0, "w_av": 1.0, "w_gp": 1.0, "w_vgp": 1.0, "w_foot": 1.0}


def test_layer_precedence(tmp_path):
    f = tmp_path / "c.toml"
    f.write_text('seed = 3\n[optim]\nlr = 0.002\nsteps = 10\n[data]\nF = 16\n')
    env = {"SKELGEN_OPTIM__STEPS": "20", "SKELGEN_DATA__F": "24", "PATH": "/bin"}
    cfg = resolve_config(f, {"data.F": "32"}, env)
    assert cfg["seed"] == 3 and cfg["optim.lr"] == 0.002  # file
    assert cfg["optim.steps"] == 20  # env beats file
    assert cfg["data.F"] == 32  # override beats env


def test_json_file_with_dotted_keys(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"model.base_channels": 32, "data": {"normalize": False}}))
    assert read_config_file(f) == {"model.base_channels": 32, "data.normalize": False}
    cfg = resolve_config(f, environ={})
    assert cfg["model.base_channels"] == 32 and cfg["data.normalize"] is False


@pytest.mark.parametrize("value, expected", [("true", True), ("0", False), ("off", False), (1, True)])
def test_bool_coercion(value, expected):
    assert resolve_config(overrides={"data.normalize": value}, environ={})["data.normalize"] is expected


@pytest.mark.parametrize("key, value", [("data.normalize", "maybe"), ("data.F", "sixteen"), ("data.F", 2.5),
                                        ("optim.lr", "fast")])
def test_bad_values_rejected(key, value):
    with pytest.raises(ConfigError):
        resolve_config(overrides={key: value}, environ={})


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError):
        resolve_config(overrides={"model.widht": 3}, environ={})
    with pytest.raises(ConfigError):
        resolve_config(environ={"SKELGEN_MODEL__WIDHT": "3"})
    f = tmp_path / "c.toml"
    f.write_text("[optim]\nlearning_rate = 1\n")
    with pytest.raises(ConfigError):
        resolve_config(f, environ={})


def test_bad_files(tmp_path):
    (tmp_path / "c.yaml").write_text("a: 1\n")
    with pytest.raises(ConfigError):
        read_config_file(tmp_path / "c.yaml")
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigError):
        read_config_file(tmp_path / "c.json")
    (tmp_path / "l.json").write_text("[1, 2]")
    with pytest.raises(ConfigError):
        read_config_file(tmp_path / "l.json")


def test_to_json_is_sorted_and_complete():
    cfg = resolve_config(environ={})
    back = json.loads(cfg.to_json())
    assert back == dict(cfg) and list(back) == sorted(back)
