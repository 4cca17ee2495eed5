# -*- coding: utf-8 -*-
"""
Run configuration
One YAML document with synth / model / train / sweep sections plus the master
seed and output root. Omitted sections and fields take their defaults;
unknown keys are rejected.
"""
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass

import yaml

from .dataset_synth import SynthConfig
from .errors import ConfigError, InvalidArgumentError, ShapeError
from .evaluation import SweepSpec
from .model import ModelConfig
from .training import TrainConfig

WORKERS_ENV = "KEYPATCH_WORKERS"
EFFECTIVE_CONFIG_NAME = "effective_config.yaml"


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    seed: int = 0
    output_root: str = "runs"

    def validate(self):
        try:
            self.synth.validate()
            self.model.validate()
            self.train.validate()
            self.sweep.validate()
        except (InvalidArgumentError, ShapeError) as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self):
        return _plain(asdict(self))


def _plain(value):
    """Tuples to lists, recursively, so the document is safe_dump-able"""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _build(cls, record, path):
    if record is None:
        return cls()
    if not isinstance(record, dict):
        raise ConfigError(f"{path or 'document'} must be a mapping, got {type(record).__name__}")
    defaults = cls()
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(record) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {path or 'document'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in record.items():
        current = getattr(defaults, name)
        where = f"{path}.{name}" if path else name
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, where)
        elif isinstance(current, tuple) and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, InvalidArgumentError, ShapeError) as exc:
        raise ConfigError(f"invalid {path or 'document'}: {exc}") from exc


def config_from_dict(record):
    return _build(RunConfig, record, "").validate()


def load_config(path=None):
    """RunConfig from a YAML file; defaults when path is None"""
    if path is None:
        return RunConfig().validate()
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            record = yaml.safe_load(f)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(record or {})


def dump_config(cfg, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=False)
    return path


def write_effective_config(cfg, out_dir):
    """Frozen copy of the configuration a command actually ran with"""
    return dump_config(cfg, os.path.join(out_dir, EFFECTIVE_CONFIG_NAME))


def worker_count(default=1):
    value = os.environ.get(WORKERS_ENV)
    if value in (None, ""):
        return default
    try:
        workers = int(value)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got '{value}'")
    if workers < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1, got {workers}")
    return workers
