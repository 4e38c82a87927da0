import pytest

from ascnet.config import ConfigError, apply_overrides, dump_config, load_config, RunConfig


def test_defaults():
    cfg = load_config(None)
    assert cfg.train.stage1_cycles == 2 and cfg.segment.threshold == "auto"
    assert cfg.network.input_size == (64, 64)


def test_file_then_overrides(tmp_path):
    f = tmp_path / "c.toml"
    f.write_text('seed = 3\ntrain.stage1_cycles = 4\nnetwork.encoder_widths = [4, 8, 16, 32]\nnetwork.transition_width = 64\n[segment]\npolarity = "dark"\n')
    cfg = load_config(f, {"train.stage1_cycles": "5"})
    assert cfg.seed == 3 and cfg.train.stage1_cycles == 5
    assert cfg.network.encoder_widths == (4, 8, 16, 32) and cfg.segment.polarity == "dark"


def test_roundtrip(tmp_path):
    cfg = apply_overrides(RunConfig(), {"seed": 7, "synth.polarity": "dark", "segment.post_process": "true", "network.input_size": "32,32"})
    f = tmp_path / "r.toml"
    f.write_text(dump_config(cfg))
    again = load_config(f)
    assert dump_config(again) == dump_config(cfg)
    assert again.segment.post_process is True and again.network.input_size == (32, 32)


@pytest.mark.parametrize(
    "values",
    [{"train.nope": 1}, {"bogus": 1}, {"train.stage1_cycles": "x"}, {"segment.post_process": "maybe"}, {"synth.radius_max": 40}],
)
def test_rejects(values):
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), values)


def test_threshold_level():
    cfg = apply_overrides(RunConfig(), {"segment.threshold": "254"})
    assert cfg.segment.threshold_level() == 254
    cfg = apply_overrides(RunConfig(), {"segment.threshold": "300"})
    with pytest.raises(ConfigError):
        cfg.segment.threshold_level()


def test_missing_or_broken_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("train.stage1_cycles = = 2")
    with pytest.raises(ConfigError):
        load_config(bad)
