import pytest

from volnav.config import ENV_VAR, Config, ConfigError, load_config, parse_assignments


def test_defaults_match_full_model():
    cfg = load_config()
    assert cfg == Config()
    assert cfg.grid().dims == (120, 120, 35)
    assert [s.dims for s in cfg.encoder_config().level_specs()][-1] == (120, 120, 32)
    assert cfg.radius == 1


def test_file_then_overrides(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\ndim = 16\nheads = 2\npolicy_heads = 2\n\nupsample = trilinear  # inline\n")
    cfg = load_config(path, ["dim=32"])
    assert cfg.dim == 32 and cfg.heads == 2 and cfg.upsample == "trilinear"


def test_env_var_supplies_default_path(tmp_path, monkeypatch):
    path = tmp_path / "c.cfg"
    path.write_text("seed = 9\n")
    monkeypatch.setenv(ENV_VAR, str(path))
    assert load_config().seed == 9
    assert load_config(use_env=False).seed == 0


@pytest.mark.parametrize("line", ["bogus = 1", "dim = many", "x_range = 1", "object_head = maybe", "no equals"])
def test_rejects_bad_lines(line):
    with pytest.raises(ConfigError):
        parse_assignments([line])


@pytest.mark.parametrize("override", ["neighborhood=8", "neighborhood=4", "w_g=1.5", "dim=10", "upsample=cubic",
                                      "z_cells=40", "view_features=photos"])
def test_rejects_invalid_values(override):
    with pytest.raises(ConfigError):
        load_config(overrides=[override])


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/volnav.cfg")


def test_text_round_trip(tmp_path):
    cfg = load_config(overrides=["resolution=0.4", "z_cells=8", "object_head=true", "x_range=-4,4"])
    path = tmp_path / "c.cfg"
    path.write_text(cfg.to_text())
    assert load_config(path) == cfg
