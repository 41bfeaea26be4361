import json

import pytest

from vinseg.config import Config, ConfigError, config_from_doc, load_config


def test_defaults_round_trip():
    cfg = Config()
    doc = json.loads(json.dumps(cfg.to_doc()))
    assert config_from_doc(doc) == cfg


def test_partial_override(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"epochs": 2}, "loss": {"lambda_lovasz": 0.5}, "ics": {"m_p": 0.2}}))
    cfg = load_config(str(p))
    assert cfg.train.epochs == 2 and cfg.train.lambda_lovasz == 0.5 and cfg.ics.m_p == 0.2
    assert cfg.scene == Config().scene
    assert load_config(None) == Config()


@pytest.mark.parametrize("doc", [
    {"nope": {}},
    {"train": {"epochz": 1}},
    {"train": {"label_fraction": 2}},
    {"ics": {"m_p": 5}},
    {"grid": {"origin": [0, 0, 0], "voxel_size": [0, 1, 1], "dims": [1, 1, 1]}},
    {"taxonomy": "x"},
    {"scene": {"things": [{"name": "car"}]}},
    [],
])
def test_invalid(doc):
    with pytest.raises(ConfigError):
        config_from_doc(doc)


def test_bad_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{")
    with pytest.raises(ConfigError):
        load_config(str(p))
