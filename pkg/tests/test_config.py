import pytest

from gensemrec.config import MODES, RunConfig, config_from_dict, dump_config, load_config, parse_override
from gensemrec.errors import ConfigError


def test_defaults_validate():
    cfg = load_config()
    assert cfg == RunConfig()
    assert cfg.a2po.mode == "full" and cfg.a2po.group_size == 16 and cfg.a2po.delta == 0.2
    assert set(MODES) == {"business_only", "reward_sum", "adv_sum", "gate_only", "magnitude_only", "full"}


def test_yaml_file_and_overrides(tmp_path):
    (tmp_path / "c.yaml").write_text("seed: 3\na2po:\n  p: 0.5\n  mode: adv_sum\nworld:\n  level_quota: [0.25, 0.25, 0.25, 0.25]\n")
    cfg = load_config(tmp_path / "c.yaml", ["a2po.p=0.05", ("policy.lr", 1e-3)])
    assert cfg.seed == 3 and cfg.a2po.p == 0.05 and cfg.a2po.mode == "adv_sum"
    assert cfg.policy.lr == 1e-3 and cfg.world.level_quota == [0.25] * 4


def test_int_is_accepted_for_float_fields():
    assert load_config(None, ["a2po.p=1"]).a2po.p == 1.0


@pytest.mark.parametrize(
    "override, fragment",
    [
        ("a2po.gamma=1", "a2po.gamma"),
        ("wrld.seed=1", "wrld"),
        ("a2po.p=2", "a2po.p"),
        ("a2po.mode=fancy", "a2po.mode"),
        ("a2po.group_size=1.5", "a2po.group_size"),
        ("seed=abc", "seed"),
        ("a2po.semantic_weights=oracle", "semantic_weights"),
        ("judge.noise=1.5", "judge.noise"),
    ],
)
def test_bad_keys_and_values_are_named(override, fragment):
    with pytest.raises(ConfigError, match=fragment):
        load_config(None, [override])


def test_bad_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.yaml")
    (tmp_path / "typo.yaml").write_text("a2po:\n  groupsize: 8\n")
    with pytest.raises(ConfigError, match="groupsize"):
        load_config(tmp_path / "typo.yaml")


def test_override_syntax():
    assert parse_override("a.b=[1, 2]") == ("a.b", [1, 2])
    with pytest.raises(ConfigError):
        parse_override("a.b")


def test_dump_round_trip_and_digest(tmp_path):
    cfg = load_config(None, ["seed=9", "a2po.mode=gate_only"])
    dump_config(cfg, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back == cfg and back.digest() == cfg.digest()
    assert config_from_dict(cfg.to_dict()) == cfg
    assert load_config(None, ["seed=10"]).digest() != cfg.digest()
