import json

import pytest
import yaml

from moase_tta.config import (
    ConfigError,
    ExperimentConfig,
    build_section,
    env_overrides,
    load_config,
    named_stream,
)
from moase_tta.numeric import Polarity


def _write(tmp_path, document, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(document) if name.endswith(".json") else yaml.safe_dump(document))
    return path


def test_defaults_load_and_validate():
    config = load_config(environ={})
    assert config.daopd.ema_alpha == 0.99
    assert config.trainer.learning_rate == 1e-3
    assert config.model.input_dim == config.stream.input_dim
    families = [d.family for d in config.stream.domains]
    assert families[0] == "identity"
    assert families[-1] == "occlude"
    assert len(families) == 6


def test_unknown_key_is_rejected_with_its_path(tmp_path):
    path = _write(tmp_path, {"daopd": {"ema_alfa": 0.9}})
    with pytest.raises(ConfigError) as excinfo:
        load_config(path, environ={})
    assert excinfo.value.field_path == "daopd.ema_alfa"


def test_unknown_section_is_rejected(tmp_path):
    with pytest.raises(ConfigError) as excinfo:
        load_config(_write(tmp_path, {"training": {}}), environ={})
    assert excinfo.value.field_path == "training"


def test_wrong_types_are_rejected(tmp_path):
    with pytest.raises(ConfigError) as excinfo:
        load_config(_write(tmp_path, {"daopd": {"views": "two"}}), environ={})
    assert excinfo.value.field_path == "daopd.views"
    with pytest.raises(ConfigError) as excinfo:
        load_config(_write(tmp_path, {"model": {"use_sdd": 1}}), environ={})
    assert excinfo.value.field_path == "model.use_sdd"


def test_missing_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json", environ={})


def test_yaml_documents_are_accepted(tmp_path):
    document = {
        "daopd": {"temperature": 2.0},
        "model": {"experts": [{"polarity": "top", "keep_ratio": 0.5, "rank": 4}, {"polarity": "<=", "rank": 2}]},
        "stream": {"domains": ["smooth", {"family": "contrast", "severity": 3, "duration": 5}]},
    }
    document["model"]["num_experts"] = 2
    config = load_config(_write(tmp_path, document, "config.yaml"), environ={})
    assert config.daopd.temperature == 2.0
    assert [s.polarity for s in config.model.experts] == [Polarity.TOP, Polarity.BOTTOM]
    assert [(d.name, d.severity, d.duration) for d in config.stream.domains] == [("smooth", 5, 50), ("contrast", 3, 5)]


def test_preset_then_file_then_environment(tmp_path):
    path = _write(tmp_path, {"daopd": {"views": 3, "opd_weight": 0.2}})
    environ = {"MOASE_TTA__DAOPD__OPD_WEIGHT": "0.7", "UNRELATED": "x"}
    config = load_config(path, preset="cifar100", environ=environ)
    assert config.daopd.ema_alpha == 0.998
    assert config.daopd.temperature == 2.5
    assert config.daopd.views == 3
    assert config.daopd.opd_weight == 0.7
    assert config.trainer.learning_rate == 1e-4
    assert load_config(environ={}).trainer.learning_rate == 1e-3


def test_unknown_preset(tmp_path):
    with pytest.raises(ConfigError) as excinfo:
        load_config(preset="svhn", environ={})
    assert excinfo.value.field_path == "preset"


def test_env_overrides_parse_scalars():
    overrides = env_overrides({"MOASE_TTA__TRAINER__TRACE_HASHES": "true", "MOASE_TTA__STREAM__ROUNDS": "3"})
    assert overrides == {"trainer": {"trace_hashes": True}, "stream": {"rounds": 3}}
    with pytest.raises(ConfigError):
        env_overrides({"MOASE_TTA__NOPE": "1"})


def test_domain_errors_become_config_errors(tmp_path):
    with pytest.raises(ConfigError) as excinfo:
        load_config(_write(tmp_path, {"model": {"num_experts": 3}}), environ={})
    assert excinfo.value.field_path == "model"


def test_model_must_match_stream(tmp_path):
    with pytest.raises(ConfigError) as excinfo:
        load_config(_write(tmp_path, {"stream": {"input_dim": 5}}), environ={})
    assert excinfo.value.field_path == "model.input_dim"


def test_invalid_domain_spec(tmp_path):
    with pytest.raises(ConfigError) as excinfo:
        load_config(_write(tmp_path, {"stream": {"domains": [{"family": "fog"}]}}), environ={})
    assert excinfo.value.field_path == "stream.domains[0].family"
    with pytest.raises(ConfigError) as excinfo:
        load_config(_write(tmp_path, {"stream": {"domains": [{"family": "smooth", "severity": 9}]}}), environ={})
    assert excinfo.value.field_path == "stream.domains[0].severity"


def test_named_streams():
    assert len(named_stream("default", 10)) == 6
    assert [d.family for d in named_stream("occlude")] == ["occlude"]
    with pytest.raises(ConfigError):
        named_stream("fog")


def test_to_dict_reloads_to_the_same_config(tmp_path):
    original = ExperimentConfig()
    original.daopd.temperature = 1.5
    original.stream.rounds = 2
    path = _write(tmp_path, original.to_dict(), "dump.yaml")
    assert load_config(path, environ={}).to_dict() == original.to_dict()


def test_build_section_keeps_base_values():
    base = build_section("daopd", {"views": 4})
    updated = build_section("daopd", {"temperature": 3}, base)
    assert (updated.views, updated.temperature) == (4, 3.0)
    assert isinstance(updated.temperature, float)
