"""Config construction, strict key checking, and file loading."""

import json

import pytest

from cade.config import (ConfigError, LagrangeSection, RunConfig,
                         load_config_file)


def test_defaults_validate_and_round_trip():
    cfg = RunConfig().validate()
    again = RunConfig.from_dict(cfg.to_dict()).validate()
    assert again == cfg
    assert cfg.adv == "mgae" and cfg.safety.mode == "off"
    assert cfg.lagrange.beta_max == 2.0 and cfg.trust.kl_mask == 0.02


def test_unknown_top_level_key_is_named():
    with pytest.raises(ConfigError, match="bogus_key"):
        RunConfig.from_dict({"bogus_key": 1})


def test_unknown_nested_key_names_section_and_key():
    with pytest.raises(ConfigError, match=r"lagrange.*learning_rate"):
        RunConfig.from_dict({"lagrange": {"learning_rate": 0.1}})


def test_multiple_unknown_keys_all_listed():
    with pytest.raises(ConfigError, match=r"aaa, zzz"):
        RunConfig.from_dict({"zzz": 1, "aaa": 2})


def test_scalar_type_checking():
    assert RunConfig.from_dict({"seed": 7.0}).seed == 7  # integral float ok
    with pytest.raises(ConfigError, match="seed"):
        RunConfig.from_dict({"seed": 7.5})
    with pytest.raises(ConfigError, match="seed"):
        RunConfig.from_dict({"seed": True})
    with pytest.raises(ConfigError, match="gamma"):
        RunConfig.from_dict({"gamma": "high"})
    with pytest.raises(ConfigError, match="normalize_adv"):
        RunConfig.from_dict({"normalize_adv": 1})
    with pytest.raises(ConfigError, match="env"):
        RunConfig.from_dict({"env": 3})


def test_nested_section_must_be_mapping():
    with pytest.raises(ConfigError, match="trust"):
        RunConfig.from_dict({"trust": 0.02})


@pytest.mark.parametrize("patch,needle", [
    ({"env": "atari"}, "env"),
    ({"level": "extreme"}, "level"),
    ({"adv": "ppo"}, "adv"),
    ({"mgae_mode": "both"}, "mgae_mode"),
    ({"safety": {"mode": "always"}}, "safety.mode"),
    ({"step_budget": -1}, "step_budget"),
    ({"gamma": 0.0}, "gamma"),
    ({"lam": 1.5}, "lam"),
    ({"actor_epochs": 0}, "actor_epochs"),
    ({"lr": 0.0}, "lr"),
    ({"cost_adv": {"horizon": 0}}, "cost_adv.horizon"),
    ({"safety": {"activation_fraction": 1.5}}, "activation_fraction"),
])
def test_validation_rejects_bad_values(patch, needle):
    base = RunConfig().to_dict()
    for key, value in patch.items():
        if isinstance(value, dict):
            base[key].update(value)
        else:
            base[key] = value
    with pytest.raises(ConfigError, match=needle.replace(".", r"\.")):
        RunConfig.from_dict(base).validate()


def test_load_config_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"env": "planar-river", "lagrange": {"enabled": True}}))
    data = load_config_file(str(path))
    cfg = RunConfig.from_dict({**RunConfig().to_dict(), **data})
    # top-level replace is intentional here; nested merge is the CLI's job
    assert cfg.env == "planar-river"
    assert cfg.lagrange == LagrangeSection(enabled=True)

    with pytest.raises(ConfigError, match="not found"):
        load_config_file(str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="valid JSON"):
        load_config_file(str(bad))
    arr = tmp_path / "arr.json"
    arr.write_text("[1, 2]")
    with pytest.raises(ConfigError, match="JSON object"):
        load_config_file(str(arr))
