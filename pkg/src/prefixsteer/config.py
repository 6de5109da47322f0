"""Experiment configuration: nested dataclasses, YAML round-trip, canonical
hashing and named random streams."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .attribute import DiscTrainConfig
from .corpus import CorpusSpec, build_vocab
from .errors import ConfigError
from .lm import DecodeConfig, LMConfig
from .rldaf import RLDAFConfig
from .steer import SteerConfig

DEFAULT_VOCAB = len(build_vocab(CorpusSpec()))


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 800
    batch: int = 16
    lr: float = 3e-3
    corpus_size: int = 3000
    heldout: int = 200
    log_every: int = 1
    prefix_prob: float = 0.5
    neutral_prefix_prob: float = 0.5

    def validate(self) -> PretrainConfig:
        if self.steps < 0 or self.batch < 1 or self.lr <= 0 or self.log_every < 1:
            raise ConfigError("invalid pretraining settings")
        if not (0.0 <= self.prefix_prob <= 1.0 and 0.0 <= self.neutral_prefix_prob <= 1.0):
            raise ConfigError("prefix probabilities must lie in [0, 1]")
        if self.corpus_size < 1 or self.heldout < 1:
            raise ConfigError("corpus_size and heldout must be positive")
        return self


@dataclass(frozen=True)
class DiscConfig:
    train_size: int = 1000
    judge_size: int = 1000
    epochs: int = 300
    lr: float = 0.05
    heldout_frac: float = 0.2

    def validate(self) -> DiscConfig:
        if self.train_size < 2 or self.judge_size < 2 or self.epochs < 0 or self.lr <= 0:
            raise ConfigError("invalid discriminator settings")
        return self

    def train_config(self, seed: int) -> DiscTrainConfig:
        return DiscTrainConfig(epochs=self.epochs, lr=self.lr,
                               heldout_frac=self.heldout_frac, seed=seed)


@dataclass(frozen=True)
class EvalConfig:
    task: str = "topic"
    n_prompts: int = 100
    prompt_len: int = 2
    test_bag_threshold: float = 0.5
    prefix_init_scale: float = 0.1
    null_prefix_steps: int = 200

    def validate(self) -> EvalConfig:
        if self.task not in ("topic", "sentiment"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.n_prompts < 1 or self.prompt_len < 1:
            raise ConfigError("n_prompts and prompt_len must be positive")
        if not 0.0 <= self.test_bag_threshold <= 1.0:
            raise ConfigError("test_bag_threshold must lie in [0, 1]")
        return self


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one run depends on.

    ``steer`` applies at inference; ``rollout_steer`` is the steering used
    inside RLDAF rollouts, so inference-only ablations share a training run.
    """

    seed: int = 0
    out: str = "runs/default"
    use_rldaf: bool = True
    use_prefix: bool = True
    lm: LMConfig = LMConfig(vocab_size=DEFAULT_VOCAB)
    corpus: CorpusSpec = CorpusSpec()
    pretrain: PretrainConfig = PretrainConfig()
    disc: DiscConfig = DiscConfig()
    steer: SteerConfig = SteerConfig()
    rollout_steer: SteerConfig = SteerConfig()
    rldaf: RLDAFConfig = RLDAFConfig()
    decode: DecodeConfig = DecodeConfig()
    eval: EvalConfig = EvalConfig()

    def validate(self) -> ExperimentConfig:
        for f in fields(self):
            v = getattr(self, f.name)
            if hasattr(v, "validate"):
                v.validate()
        vocab = len(build_vocab(self.corpus))
        if self.lm.vocab_size != vocab:
            raise ConfigError(f"lm.vocab_size={self.lm.vocab_size} but the corpus vocab has {vocab}")
        return self

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def hash(self) -> str:
        return config_hash(self)

    def with_overrides(self, overrides: dict[str, Any]) -> ExperimentConfig:
        return apply_overrides(self, overrides)


def canonical_json(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


def _build(cls, data: dict, path: str, defaults=None):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    defaults = cls() if defaults is None else defaults
    for name, value in data.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{path}{name}.", current)
        elif isinstance(current, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = _coerce(current, value, path + name)
    return dataclasses.replace(defaults, **kwargs)


def _coerce(current, value, where: str):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(value, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, str) and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


def from_dict(data: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "").validate()


def load_config(path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(data)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    """Replace dotted keys, e.g. ``{"steer.m": 0, "rldaf.beta": 0.0}``."""
    data = cfg.to_dict()
    for key, value in overrides.items():
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config section in {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = yaml.safe_load(value) if isinstance(value, str) and \
            not isinstance(node[parts[-1]], str) else value
    return from_dict(data)


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose (corpus, init, rollout, decode...)."""
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def stream_seed(seed: int, name: str) -> int:
    return int(stream(seed, name).integers(2 ** 31))
