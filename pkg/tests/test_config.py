import pytest
import yaml

from fewvod.config import (
    apply_overrides,
    config_to_dict,
    default_config,
    dump_config,
    load_config,
    parse_config,
    save_config,
)
from fewvod.errors import ConfigError


def test_defaults_carry_reference_values():
    cfg = default_config()
    assert cfg.fusion.tau == 0.94
    assert cfg.heads.kappa == 0.98
    assert cfg.heads.temperature_init == 10.0
    assert cfg.loss.lambda_cls == 2.0 and cfg.loss.lambda_box == 5.0
    assert cfg.loss.weight_l1 == 5.0 and cfg.loss.weight_giou == 2.0
    assert cfg.loss.background_weight == 0.1
    assert cfg.optim.learning_rate == 1e-5
    assert cfg.optim.weight_decay == 0.01
    assert cfg.fusion.retained_cap == 32
    cfg.validate()


def test_dump_parse_fixed_point():
    cfg = default_config()
    text = dump_config(cfg)
    again = parse_config(yaml.safe_load(text))
    assert config_to_dict(again) == config_to_dict(cfg)
    assert dump_config(again) == text


def test_save_load_round_trip(tmp_path):
    cfg = default_config()
    cfg.seed = 17
    cfg.fusion.tau = 0.7
    path = tmp_path / "run.yaml"
    save_config(cfg, str(path))
    loaded = load_config(str(path))
    assert loaded.seed == 17
    assert loaded.fusion.tau == 0.7
    assert config_to_dict(loaded) == config_to_dict(cfg)


def test_unknown_keys_rejected():
    payload = config_to_dict(default_config())
    payload["fusion"]["momentum"] = 0.9
    with pytest.raises(ConfigError, match="momentum"):
        parse_config(payload)
    payload = config_to_dict(default_config())
    payload["colour"] = "red"
    with pytest.raises(ConfigError, match="colour"):
        parse_config(payload)


def test_partial_payload_fills_defaults():
    cfg = parse_config({"fusion": {"tau": 0.8}})
    assert cfg.fusion.tau == 0.8
    assert cfg.fusion.enabled is True
    assert cfg.encoder.embed_dim == 64


def test_type_coercion():
    cfg = parse_config({"heads": {"temperature_init": 5}})  # int promoted to float
    assert cfg.heads.temperature_init == 5.0 and isinstance(cfg.heads.temperature_init, float)
    with pytest.raises(ConfigError):
        parse_config({"fusion": {"enabled": "yes please"}})
    with pytest.raises(ConfigError):
        parse_config({"encoder": {"embed_dim": "wide"}})


def test_validation_failures():
    with pytest.raises(ConfigError):
        parse_config({"encoder": {"embed_dim": 6}})
    with pytest.raises(ConfigError):
        parse_config({"fusion": {"num_heads": 3}})  # 64 % 3 != 0
    with pytest.raises(ConfigError):
        parse_config({"data": {"canvas_size": 60}})  # not divisible by patch 8


def test_apply_overrides():
    cfg = default_config()
    out = apply_overrides(cfg, ["fusion.tau=0.7", "optim.epochs=3", "heads.nms_iou=0.5",
                                "fusion.enabled=false"])
    assert out.fusion.tau == 0.7
    assert out.optim.epochs == 3
    assert out.heads.nms_iou == 0.5
    assert out.fusion.enabled is False
    # original untouched
    assert cfg.fusion.tau == 0.94


def test_apply_overrides_errors():
    cfg = default_config()
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["fusion.tau"])  # no '='
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["rocket.fuel=1"])
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["fusion.warp=1"])
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["seed.x=1"])  # scalar root key has no subkey


def test_overrides_are_validated():
    cfg = default_config()
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["encoder.embed_dim=6"])


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "nope.yaml"))


def test_load_config_bad_yaml(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("fusion: [unclosed")
    with pytest.raises(ConfigError):
        load_config(str(path))
