import pytest

from courtnet.config import (
    ConfigError,
    EmbedConfig,
    JuryConfig,
    ProsecutionConfig,
    RunConfig,
    format_kv,
    load_run_config,
    parse_kv,
)
from courtnet.data import SceneSpec
from courtnet.config import dataclass_from_kv


def test_defaults():
    cfg = RunConfig()
    assert cfg.embed.embed_dim == 64 and cfg.embed.num_patches == 196
    assert cfg.prosecution.n_blocks == 4
    assert cfg.train.loss.gamma == 3 and cfg.train.loss.abl_weight == 10.0
    assert cfg.train.schedule.warmup_steps == 200
    assert cfg.threshold == 0.5


def test_widths():
    assert [ProsecutionConfig().width_after(i) for i in range(5)] == [64, 96, 128, 160, 192]
    assert ProsecutionConfig(n_blocks=12).width_after(12) == 448


def test_jury_feature_map():
    assert JuryConfig().feature_hw == (4, 4)
    with pytest.raises(ConfigError):
        JuryConfig(image_h=4, image_w=4, conv_channels=(1, 1, 1, 1))


def test_mapping_round_trip():
    cfg = RunConfig().replace(gamma=0, no_jury="true", jury_channels="8,8")
    back = RunConfig.from_mapping(cfg.to_mapping())
    assert back == cfg
    assert back.train.no_jury and back.jury.conv_channels == (8, 8)


def test_parse_kv_comments_and_blank_lines():
    text = "# header\n\ngamma = 2  # inline\nseed=4\n"
    assert parse_kv(text) == {"gamma": "2", "seed": "4"}


@pytest.mark.parametrize("text", ["gamma\n", "=3\n", "gamma=1\ngamma=2\n"])
def test_parse_kv_errors(text):
    with pytest.raises(ConfigError):
        parse_kv(text)


def test_unknown_and_bad_values():
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_mapping({"learning_rate": "1"})
    with pytest.raises(ConfigError, match="gamma"):
        RunConfig.from_mapping({"gamma": "three"})
    with pytest.raises(ConfigError):
        RunConfig.from_mapping({"no_jury": "maybe"})


def test_divisibility_checked():
    with pytest.raises(ConfigError):
        RunConfig().replace(pros_heads=5)
    with pytest.raises(ConfigError):
        RunConfig().replace(fine_groups=3)


def test_load_with_overrides(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text(format_kv({"gamma": 1, "epochs": 7}))
    cfg = load_run_config(path, gamma=0, seed=None)
    assert cfg.train.loss.gamma == 0 and cfg.train.epochs == 7


def test_scene_spec_from_kv():
    spec = dataclass_from_kv(SceneSpec, {"seed": "5", "noise_sigma": "0.1", "n_targets_max": "1"})
    assert spec.seed == 5 and spec.noise_sigma == 0.1 and spec.n_targets_max == 1
    with pytest.raises(ConfigError):
        dataclass_from_kv(SceneSpec, {"colour": "red"})


def test_embed_divisibility():
    with pytest.raises(ConfigError):
        EmbedConfig(image_h=56, image_w=56, grid=5)
