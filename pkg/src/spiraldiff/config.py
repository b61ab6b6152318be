"""Experiment configuration: typed dataclasses, strict JSON loading, hashing.

The config file is a single JSON document mirroring ExperimentConfig.
Unknown keys are errors (anti-typo). The experiment seed is mandatory and
feeds every random stream through named sub-streams; per-stage seeds may
override it but default to inheriting.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass
class PyramidConfig:
    levels: int = 4
    keep_ratios: tuple = (0.5, 0.5, 0.5)
    kernel_size: int = 9
    dilation: int = 2

    def validate(self):
        if self.levels < 2:
            raise ConfigError("pyramid.levels must be >= 2")
        if len(self.keep_ratios) != self.levels - 1:
            raise ConfigError("pyramid.keep_ratios needs levels-1 entries")
        if any(not 0.0 < r < 1.0 for r in self.keep_ratios):
            raise ConfigError("pyramid.keep_ratios must lie in (0, 1)")
        if self.kernel_size < 1 or self.dilation < 1:
            raise ConfigError("pyramid kernel_size and dilation must be >= 1")


@dataclass
class CorpusConfig:
    subjects: int = 2
    sentences_per_subject: int = 2
    frames_min: int = 30
    frames_max: int = 30
    frame_rate: float = 25.0
    mesh_subdivisions: int = 2
    audio_channels: int = 8
    noise_amplitude: float = 0.0
    motion_scale: float = 1.0
    val_sentences: int = 0
    test_sentences: int = 0

    def validate(self):
        if self.subjects < 1 or self.sentences_per_subject < 1:
            raise ConfigError("corpus needs at least one subject and sentence")
        if not 1 <= self.frames_min <= self.frames_max:
            raise ConfigError("corpus frame range invalid")
        if self.mesh_subdivisions < 0 or self.audio_channels < 1:
            raise ConfigError("corpus mesh/audio settings invalid")
        if self.noise_amplitude < 0 or self.motion_scale <= 0:
            raise ConfigError("corpus amplitude settings invalid")
        held_out = self.val_sentences + self.test_sentences
        if self.val_sentences < 0 or self.test_sentences < 0 or held_out >= self.sentences_per_subject:
            raise ConfigError("corpus split sizes must leave at least one training sentence")


@dataclass
class Stage1Config:
    lambda_rec: float = 1.0
    lambda_quant: float = 1.0
    beta: float = 0.25
    codebook_size: int = 256
    latent_h: int = 8
    latent_c: int = 64
    encoder_channels: tuple = (16, 32, 64, 64)
    temporal_layers: int = 4
    temporal_heads: int = 4
    ff_mult: int = 4
    decoder_hidden: int = 256
    block_nonlinearity: str = "leaky_relu"
    epochs: int = 200
    lr: float = 1e-4
    lr_halve_every: int = 50
    optimizer: str = "adamw"
    weight_decay: float = 1e-4
    seed: int | None = None

    def validate(self):
        if self.lambda_rec < 0 or self.lambda_quant < 0:
            raise ConfigError("stage1 loss weights must be >= 0")
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError("stage1.beta must lie in (0, 1]")
        if self.codebook_size < 2:
            raise ConfigError("stage1.codebook_size must be >= 2")
        if self.latent_h < 1 or self.latent_c < 1:
            raise ConfigError("stage1 latent dims must be >= 1")
        if (self.latent_h * self.latent_c) % self.temporal_heads != 0:
            raise ConfigError("stage1 model dim must divide evenly across heads")
        if self.block_nonlinearity not in ("leaky_relu", "identity"):
            raise ConfigError("stage1.block_nonlinearity must be 'leaky_relu' or 'identity'")
        if self.optimizer not in ("adamw", "adam"):
            raise ConfigError("stage1.optimizer must be 'adamw' or 'adam'")
        if self.epochs < 0 or self.lr <= 0:
            raise ConfigError("stage1 epochs/lr invalid")


@dataclass
class Stage2Config:
    lambda_rec: float = 1.0
    lambda_vel: float = 1.0
    huber_delta: float = 1.0
    steps: int = 50
    schedule: str = "linear"
    embed_dim: int = 128
    layers: int = 4
    heads: int = 4
    ff_mult: int = 4
    bias_period: int = 1
    audio_backend: str = "conv"
    conv_layers: int = 2
    conv_width: int = 3
    epochs: int = 200
    lr: float = 1e-4
    lr_halve_every: int = 50
    optimizer: str = "adam"
    seed: int | None = None

    def validate(self):
        if self.lambda_rec < 0 or self.lambda_vel < 0:
            raise ConfigError("stage2 loss weights must be >= 0")
        if self.huber_delta <= 0:
            raise ConfigError("stage2.huber_delta must be > 0")
        if self.steps < 2:
            raise ConfigError("stage2.steps must be >= 2")
        if self.schedule not in ("linear", "linear-unscaled"):
            raise ConfigError("stage2.schedule must be 'linear' or 'linear-unscaled'")
        if self.embed_dim % self.heads != 0:
            raise ConfigError("stage2.embed_dim must divide evenly across heads")
        if self.audio_backend not in ("conv", "features"):
            raise ConfigError("stage2.audio_backend must be 'conv' or 'features'")
        if self.conv_layers < 1 or self.conv_width < 1 or self.bias_period < 1:
            raise ConfigError("stage2 conv/bias settings invalid")
        if self.optimizer not in ("adamw", "adam"):
            raise ConfigError("stage2.optimizer must be 'adamw' or 'adam'")
        if self.epochs < 0 or self.lr <= 0:
            raise ConfigError("stage2 epochs/lr invalid")


@dataclass
class ExperimentConfig:
    seed: int
    out_dir: str = "runs"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)

    def validate(self):
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        self.corpus.validate()
        self.pyramid.validate()
        self.stage1.validate()
        self.stage2.validate()

    def stage1_seed(self) -> int:
        return self.seed if self.stage1.seed is None else self.stage1.seed

    def stage2_seed(self) -> int:
        return self.seed if self.stage2.seed is None else self.stage2.seed


_NESTED = {
    "corpus": CorpusConfig,
    "pyramid": PyramidConfig,
    "stage1": Stage1Config,
    "stage2": Stage2Config,
}


def build_dataclass(cls, data: dict, where: str = "config"):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        if key in _NESTED and cls is ExperimentConfig:
            kwargs[key] = build_dataclass(_NESTED[key], value, f"{where}.{key}")
        elif isinstance(names[key].default, tuple) or isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = build_dataclass(ExperimentConfig, data, "config")
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return config_from_dict(data)


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def config_json(cfg) -> str:
    """Canonical JSON: sorted keys, no whitespace; basis for hashing."""
    return json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))


def config_hash(cfg) -> str:
    return hashlib.sha256(config_json(cfg).encode("utf-8")).hexdigest()
