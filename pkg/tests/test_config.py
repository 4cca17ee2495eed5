import pytest
import yaml

from keypatch_ready.config import (
    WORKERS_ENV,
    RunConfig,
    config_from_dict,
    dump_config,
    load_config,
    worker_count,
    write_effective_config,
)
from keypatch_ready.errors import ConfigError


class TestRunConfig:

    def test_defaults(self):
        cfg = load_config()
        assert cfg.seed == 0
        assert cfg.synth.image_size == (640, 480)
        assert cfg.train.epochs == 150 and cfg.train.batch_size == 16
        assert cfg.model.detect_threshold == 0.015
        assert cfg.sweep.axis == "scale"

    def test_yaml_round_trip(self, tmp_path):
        cfg = RunConfig()
        cfg.seed = 17
        cfg.train.lr = 1e-3
        cfg.synth.image_size = (320, 240)
        path = dump_config(cfg, str(tmp_path / "run.yaml"))
        loaded = load_config(path)
        assert loaded.to_dict() == cfg.to_dict()
        assert loaded.synth.image_size == (320, 240)

    def test_partial_sections(self):
        cfg = config_from_dict({"train": {"epochs": 30}, "synth": {"max_patches": 4}})
        assert cfg.train.epochs == 30
        assert cfg.train.lr == 5e-4
        assert cfg.synth.max_patches == 4
        assert cfg.synth.count == 20000

    def test_nested_dataclass(self):
        cfg = config_from_dict({"sweep": {"board": {"type_id": 2}}, "synth": {"degradations": {"probability": 0.1}}})
        assert cfg.sweep.board.type_id == 2
        assert cfg.sweep.board.hex_radius == 0.34
        assert cfg.synth.degradations.probability == 0.1

    @pytest.mark.parametrize("record", [
        {"trian": {}},
        {"train": {"epochz": 3}},
        {"sweep": {"board": {"colour": "red"}}},
    ])
    def test_unknown_keys(self, record):
        with pytest.raises(ConfigError):
            config_from_dict(record)

    @pytest.mark.parametrize("record", [
        {"train": {"lr": -1.0}},
        {"synth": {"image_size": [100, 100]}},
        {"model": {"detect_threshold": 2.0}},
        {"sweep": {"axis": "tilt"}},
        {"synth": 5},
    ])
    def test_invalid_values(self, record):
        with pytest.raises(ConfigError):
            config_from_dict(record)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "absent.yaml"))

    def test_malformed_yaml(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("train: [unclosed\n")
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_effective_config_written(self, tmp_path):
        path = write_effective_config(RunConfig(), str(tmp_path))
        with open(path) as f:
            record = yaml.safe_load(f)
        assert set(record) == {"synth", "model", "train", "sweep", "seed", "output_root"}


class TestWorkers:

    def test_default(self, monkeypatch):
        monkeypatch.delenv(WORKERS_ENV, raising=False)
        assert worker_count() == 1
        assert worker_count(default=4) == 4

    def test_from_environment(self, monkeypatch):
        monkeypatch.setenv(WORKERS_ENV, "3")
        assert worker_count() == 3

    @pytest.mark.parametrize("value", ["zero", "0", "-2"])
    def test_invalid(self, monkeypatch, value):
        monkeypatch.setenv(WORKERS_ENV, value)
        with pytest.raises(ConfigError):
            worker_count()
