import json

import pytest

from gdl.config import ConfigError, RunConfig, config_from_dict, load_config


def test_defaults_validate():
    cfg = RunConfig().validate()
    assert cfg.schedule.T == 1000 and cfg.experts.count == 5 and cfg.guidance.scale == 7.5


def test_roundtrip_through_json(tmp_path):
    cfg = config_from_dict({"seed": 3, "experts": {"count": 8, "rank": None}, "sampler": {"steps": 50}})
    p = tmp_path / "c.json"
    p.write_text(cfg.to_json())
    back = load_config(p)
    assert back == cfg
    assert back.experts.rank is None


def test_unknown_keys_rejected_with_path():
    with pytest.raises(ConfigError, match="experts.train.lr"):
        config_from_dict({"experts": {"train": {"lr": 1.0}}})
    with pytest.raises(ConfigError, match="unknown config key"):
        config_from_dict({"extra": 1})


def test_type_errors():
    with pytest.raises(ConfigError, match="schedule.T"):
        config_from_dict({"schedule": {"T": "1000"}})
    with pytest.raises(ConfigError, match="seed"):
        config_from_dict({"seed": True})
    with pytest.raises(ConfigError):
        config_from_dict({"task": []})


def test_int_accepted_for_float():
    assert config_from_dict({"guidance": {"scale": 5}}).guidance.scale == 5.0


@pytest.mark.parametrize("bad", [
    {"schedule": {"T": 0}},
    {"schedule": {"beta_start": 0.5, "beta_end": 0.1}},
    {"sampler": {"steps": 2000}},
    {"sampler": {"kind": "euler"}},
    {"guidance": {"target": 8}},
    {"guidance": {"mode": "magic"}},
    {"guidance": {"rho": 0.0}},
    {"experts": {"count": 2000}},
    {"experts": {"rank": -1}},
    {"metrics": {"confidence": "median"}},
    {"format_version": 2},
    {"diffusion": {"train": {"batch_size": 0}}},
])
def test_invalid_sections(bad):
    with pytest.raises(ConfigError):
        config_from_dict(bad)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.json")
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(p)


def test_output_dir_precedence(monkeypatch):
    monkeypatch.delenv("GDL_OUT", raising=False)
    cfg = RunConfig()
    assert cfg.output_dir() == "."
    monkeypatch.setenv("GDL_OUT", "/env")
    assert cfg.output_dir() == "/env"
    cfg.out_dir = "/cfg"
    assert cfg.output_dir() == "/cfg"
    assert cfg.output_dir("/flag") == "/flag"


def test_to_dict_is_plain_json():
    json.dumps(RunConfig().to_dict())
