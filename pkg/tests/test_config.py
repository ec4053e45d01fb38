import json

import pytest

from estimator.config import (CONFIG_VERSION, DEFAULT_OUTPUT_DIR, OUTPUT_DIR_ENV, PsdConfig, RunConfig, config_keys,
                              load_run_config, write_config_snapshot)
from estimator.errors import ConfigurationError, FormatError, MissingFileError
from estimator.vehicle_dynamics import STANDARD_VEHICLES


def _write(tmp_path, data, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


def test_defaults_need_a_seed():
    with pytest.raises(ConfigurationError):
        load_run_config(None)
    config = load_run_config(None, seed=42)
    assert config.seed == 42
    assert config.version == CONFIG_VERSION
    assert config.vehicles == STANDARD_VEHICLES
    assert config.psd == PsdConfig()
    assert config.simulation.signal_length == 1024
    assert config.train.K == 5


def test_output_dir_from_environment(monkeypatch):
    monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)
    assert load_run_config(None, seed=1).output_dir == DEFAULT_OUTPUT_DIR
    monkeypatch.setenv(OUTPUT_DIR_ENV, "/tmp/runs")
    config = load_run_config(None, seed=1)
    assert config.output_dir == "/tmp/runs"
    assert str(config.resolved_dataset_path) == "/tmp/runs/dataset.bin"
    assert str(config.resolved_checkpoint_path) == "/tmp/runs/model.ckpt"


def test_file_values_and_seed_override(tmp_path):
    path = _write(tmp_path, {"version": 1, "seed": 5, "n_per_class": 12, "train": {"epochs": 4},
                             "vehicles": [1, 3], "psd": {"lambda0": 0.2}})
    config = load_run_config(path)
    assert (config.seed, config.n_per_class, config.train.epochs) == (5, 12, 4)
    assert [v.class_id for v in config.vehicles] == [1, 3]
    assert config.psd.lambda0 == 0.2
    assert load_run_config(path, seed=9).seed == 9


def test_vehicle_objects_are_accepted(tmp_path):
    custom = dict(STANDARD_VEHICLES[0].to_dict(), c_s=1500.0)
    config = load_run_config(_write(tmp_path, {"version": 1, "seed": 0, "vehicles": [custom]}))
    assert config.vehicles[0].c_s == 1500.0


def test_unknown_keys_are_rejected(tmp_path):
    with pytest.raises(ConfigurationError):
        load_run_config(_write(tmp_path, {"version": 1, "seed": 0, "epochs": 3}))
    with pytest.raises(ConfigurationError):
        load_run_config(_write(tmp_path, {"version": 1, "seed": 0, "psd": {"slope": -2}}))
    with pytest.raises(ConfigurationError):
        load_run_config(_write(tmp_path, {"version": 1, "seed": 0, "vehicles": [9]}))


@pytest.mark.parametrize("data", [{"seed": 1}, {"version": 2, "seed": 1}])
def test_missing_or_wrong_version(tmp_path, data):
    with pytest.raises(FormatError):
        load_run_config(_write(tmp_path, data))


def test_missing_file_and_bad_json(tmp_path):
    with pytest.raises(MissingFileError) as info:
        load_run_config(tmp_path / "absent.json")
    assert info.value.exit_code == 3
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(FormatError) as info:
        load_run_config(bad)
    assert info.value.exit_code == 4


def test_invalid_values(tmp_path):
    with pytest.raises(ConfigurationError):
        load_run_config(_write(tmp_path, {"version": 1, "seed": 0, "test_fraction": 1.0}))
    with pytest.raises(ConfigurationError):
        load_run_config(_write(tmp_path, {"version": 1, "seed": 0, "sweep_fractions": [0.2, 0.1]}))
    with pytest.raises(ConfigurationError):
        load_run_config(_write(tmp_path, {"version": 1, "seed": 0, "train": {"n_classes": 2}}))


def test_dotted_overrides():
    config = RunConfig(seed=1).with_overrides({"train.epochs": 7, "threads": 3, "n_per_class": None,
                                               "sweep_fractions": [0.0, 0.5]})
    assert config.train.epochs == 7
    assert config.threads == 3
    assert config.n_per_class == 1000
    assert config.sweep_fractions == (0.0, 0.5)
    with pytest.raises(ConfigurationError):
        RunConfig(seed=1).with_overrides({"train.epochz": 7})
    with pytest.raises(ConfigurationError):
        RunConfig(seed=1).with_overrides({"nothing.here": 1})


def test_dict_round_trip(tmp_path):
    config = RunConfig(seed=3, output_dir=str(tmp_path), vehicles=STANDARD_VEHICLES[1:3])
    assert RunConfig.from_dict(config.to_dict()) == config
    snapshot = write_config_snapshot(config, tmp_path / "run_config.json")
    assert load_run_config(snapshot) == config


def test_config_keys_expand_sections():
    keys = config_keys(["seed", "train"])
    assert keys[0] == "seed"
    assert "train.epochs" in keys and "train.K" in keys
