import json

import pytest

from asymml import ConfigurationError
from asymml.config import ExperimentConfig, default_document, deep_merge, load_config
from asymml.trainer import FULL_EPOCHS


def test_deep_merge():
    assert deep_merge({"a": {"b": 1, "c": 2}, "d": 3}, {"a": {"b": 5}}) == {"a": {"b": 5, "c": 2}, "d": 3}


def test_default_layers():
    doc = default_document()
    assert doc["defaults"]["train"]["epochs"] == {m.value: n for m, n in FULL_EPOCHS.items()}
    assert doc["defaults"]["train"]["lr_decay"] == 0.99
    assert doc["defaults"]["train"]["weight_decay"] == 1e-6
    cfg = ExperimentConfig.from_dict(doc)
    assert cfg.train.tuples_per_epoch == 200 and cfg.train.mining.pool_size == 1000
    assert cfg.train.loss.kind.value == "regression"
    assert cfg.train.loss.rkd.angle_weight == 2.0


def test_round_trip_exact():
    cfg = ExperimentConfig.from_dict(default_document()).with_seed(7)
    again = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
    assert again == cfg
    assert again.to_json() == cfg.to_json()
    assert again.digest() == cfg.digest()


def test_seed_applies_everywhere():
    cfg = ExperimentConfig.from_dict(default_document()).with_seed(3)
    assert cfg.data.seed == cfg.train.seed == cfg.train.mining.seed == 3
    assert cfg.digest() != cfg.with_seed(4).digest()


def test_digest_ignores_paths():
    doc = default_document()
    a = ExperimentConfig.from_dict(doc)
    doc["overrides"]["paths"]["out"] = "elsewhere"
    assert ExperimentConfig.from_dict(doc).digest() == a.digest()


@pytest.mark.parametrize("override", [
    {"data": {"train_size": 10}},
    {"train": {"loss": {"kind": "nonsense"}}},
    {"train": {"bogus": 1}},
    {"eval": {"protocols": ["sideways"]}},
    {"eval": {"whitening": "maybe"}},
    {"train": {"mining": {"pool_size": 5000}}},
    {"mystery": {}},
])
def test_invalid_configs(override):
    doc = default_document()
    doc["overrides"] = deep_merge(doc["overrides"], override)
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict(doc)


def test_load_config_paths(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps(default_document()))
    cfg = load_config(tmp_path / "c.json")
    assert cfg.dataset_dir == str(tmp_path / "data")
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "bad.json")
