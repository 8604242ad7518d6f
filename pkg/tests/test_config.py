import json

import pytest

from tlf.config import PipelineConfig, default_config_dict, from_dict, load_config
from tlf.domain import ConfigError


def test_defaults_roundtrip():
    d = default_config_dict()
    cfg = from_dict(json.loads(json.dumps(d)))
    assert cfg == PipelineConfig().with_seed(d["seed"])


def test_seed_reaches_every_section():
    cfg = from_dict({"seed": 11})
    assert cfg.synth.seed == cfg.gbt.params.seed == cfg.seq2seq.seed == 11


@pytest.mark.parametrize("data,match", [
    ({"gbt": {"params": {"n_tress": 5}}}, "gbt.params.n_tress"),
    ({"bogus": 1}, "'bogus'"),
    ({"synth": []}, "synth: expected an object"),
    ({"window_minutes": 0}, "window width"),
    ({"features": {"day_feature": "weekday"}}, "day_feature"),
    ({"eval": {"min_trip_stops": 4}}, "min_trip_stops"),
    ({"gbt": {"cv_folds": 1}}, "cv_folds"),
])
def test_invalid_config(data, match):
    with pytest.raises(ConfigError, match=match):
        from_dict(data)


def test_load_config(tmp_path):
    (tmp_path / "empty.json").write_text("")
    assert load_config(tmp_path / "empty.json").seed == 7
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(tmp_path / "bad.json")
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
