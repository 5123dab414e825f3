import pytest

from shufflemixer.config import RunConfig, load_config, parse_config
from shufflemixer.network import ConfigError


def test_parse_values_and_comments():
    cfg = parse_config("preset = tiny  # small\nsteps=12\nlr = 1e-3\nchannels = 4, 8, 16\n\nablate = none\n")
    assert cfg.preset == "tiny" and cfg.steps == 12 and cfg.lr == 1e-3
    assert cfg.channels == (4, 8, 16) and cfg.ablate is None
    assert cfg.validate().pyramid().channels == (4, 8, 16)


def test_text_round_trip():
    cfg = RunConfig(preset="tiny", channels=(4, 8, 16), ablate="no-ases")
    assert parse_config(cfg.to_text()) == cfg


@pytest.mark.parametrize("text,match", [
    ("colour = red", "unknown key"),
    ("steps = 3\nsteps = 4", "duplicate"),
    ("steps = many", "bad value"),
    ("just words", "expected"),
])
def test_parse_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


@pytest.mark.parametrize("change", [
    dict(preset="huge"), dict(task="cubes"), dict(classes=2), dict(precision="f16"),
    dict(steps=0), dict(lr=-1.0), dict(preset="tiny", channels=(4, 8)),
])
def test_validation(change):
    with pytest.raises(ConfigError):
        RunConfig(**change).validate()


def test_load_with_overrides(tmp_path):
    p = tmp_path / "run.txt"
    p.write_text("preset = tiny\nseed = 3\n")
    cfg = load_config(p, seed=9, steps=None)
    assert cfg.seed == 9 and cfg.preset == "tiny" and cfg.steps == RunConfig().steps


def test_defaults_map_to_synth():
    spec = RunConfig(preset="tiny").synth()
    assert spec.side == 16 and spec.classes == 1 and spec.count == 4
