import pytest

from supernas.config import ConfigError, config_from_dict, parse_config


def test_defaults():
    cfg = config_from_dict({})
    assert [s.lr_init for s in cfg.stages] == [0.01, 0.001, 0.001]
    assert cfg.stages[0].warmup_iterations > 0 and cfg.stages[1].warmup_iterations == 0
    assert cfg.base_space().num_layers == 6
    assert cfg.supernet_space("PReLU+OE").activation_kind == "prelu"
    assert cfg.supernet_space("base").channel_proxy == ()


def test_partial_stage_overrides_keep_per_stage_defaults():
    cfg = config_from_dict({"stages": [{"iterations": 7}, {"samples_per_step": 2}]})
    assert len(cfg.stages) == 2
    assert cfg.stages[0].iterations == 7 and cfg.stages[0].lr_init == 0.01
    assert cfg.stages[1].samples_per_step == 2 and cfg.stages[1].lr_init == 0.001


def test_resnet20_mode_builds_19_layers():
    cfg = config_from_dict({"space": {"mode": "resnet20"}, "dataset": {"kind": "cifar", "path": "x", "variant": "c100"}})
    assert cfg.base_space().num_layers == 19 and cfg.num_classes() == 100


@pytest.mark.parametrize("data,where", [
    ({"stages": [{"lr_init": "fast"}]}, "stages[0].lr_init"),
    ({"stages": [{"lr_init": -1.0}]}, "stages[0]"),
    ({"dataset": {"colour": True}}, "dataset.colour"),
    ({"bogus": 1}, "bogus"),
    ({"space": {"layers": [[4, 4]]}}, "space.layers"),
    ({"space": {"mode": "resnet20", "layers": [[4, 6]] * 19}}, "space.layers"),
    ({"ablation": {"variants": ["XL"]}}, "ablation.variants[0]"),
    ({"dataset": {"kind": "cifar"}}, "dataset.path"),
    ({"eval": {"num_encodings": 1}}, "eval.num_encodings"),
    ({"stages": [{}] * 4}, "stages"),
    ({"seed": True}, "seed"),
])
def test_errors_name_the_offending_key(data, where):
    with pytest.raises(ConfigError) as err:
        config_from_dict(data)
    assert err.value.path == where


def test_yaml_round_trip(tmp_path):
    cfg = config_from_dict({"seed": 3, "stages": [{"iterations": 5}]})
    (tmp_path / "c.yaml").write_text(cfg.dump())
    assert parse_config(tmp_path / "c.yaml") == cfg


def test_invalid_yaml(tmp_path):
    (tmp_path / "c.yaml").write_text("seed: [1,\n")
    with pytest.raises(ConfigError, match="YAML"):
        parse_config(tmp_path / "c.yaml")
