import pytest

from transbts.config import PRESETS, ModelConfig, format_config, load_config, parse_config_text, preset
from transbts.errors import ConfigError


def test_defaults_describe_the_full_model():
    cfg = ModelConfig()
    assert (cfg.K, cfg.d, cfg.L, cfg.heads, cfg.ffn_hidden, cfg.os) == (128, 512, 4, 8, 4096, 8)
    assert cfg.encoder_channels == [16, 32, 64, 128]
    assert cfg.feature_extent == (16, 16, 16)
    assert cfg.num_tokens == 4096


def test_os4_unfold_geometry():
    cfg = PRESETS["os4"]
    assert cfg.encoder_channels == [16, 32, 64]
    assert cfg.feature_extent == (32, 32, 32)
    assert cfg.token_grid == (16, 16, 16)
    assert cfg.token_features == 512


def test_os16_geometry():
    cfg = PRESETS["os16"]
    assert cfg.encoder_channels == [16, 32, 64, 128, 256]
    assert cfg.token_grid == (8, 8, 8)


@pytest.mark.parametrize(
    "changes,field",
    [
        ({"K": 100}, "K"),
        ({"heads": 7}, "heads"),
        ({"os": 2}, "os"),
        ({"patch_unfold": 2}, "patch_unfold"),
        ({"input_extent": (100, 128, 128)}, "input_extent"),
        ({"dropout_p": 1.0}, "dropout_p"),
        ({"skip_position": "transformer"}, "skip_position"),
    ],
)
def test_validation_names_the_field(changes, field):
    with pytest.raises(ConfigError) as info:
        PRESETS["full"].replace(**changes)
    assert info.value.field == field


def test_text_round_trip(tmp_path):
    cfg = PRESETS["tiny"]
    path = tmp_path / "tiny.cfg"
    path.write_text("# tiny\n" + format_config(cfg))
    assert load_config(path) == cfg
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_text_parsing_over_a_base():
    cfg = parse_config_text("L = 1   # fewer layers\nffn_hidden=2048\n\n", PRESETS["full"])
    assert cfg == PRESETS["lightweight"]
    assert parse_config_text("input_extent=32x32x64", PRESETS["tiny"]).input_extent == (32, 32, 64)


def test_unknown_key_is_named():
    with pytest.raises(ConfigError) as info:
        parse_config_text("depth=3")
    assert info.value.field == "depth"
    assert "depth" in str(info.value)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"bogus": 1})


def test_malformed_lines():
    with pytest.raises(ConfigError):
        parse_config_text("L 4")
    with pytest.raises(ConfigError) as info:
        parse_config_text("L=four")
    assert info.value.field == "L"


def test_unknown_preset():
    with pytest.raises(ConfigError):
        preset("huge")
