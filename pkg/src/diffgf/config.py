"""Run configuration: one dataclass tree, stored on disk as flat dotted keys.

A config file is a YAML mapping such as::

    config_version: 1
    seed: 0
    schedule.T: 4
    codec.latent_channels: 4
    diffusion.lr: 0.002

Keys omitted from the file keep their defaults; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .codec import CodecConfig
from .dataset import DatasetSpec, StripeMaskSpec
from .denoiser import DenoiserConfig
from .mghnet import RefinerConfig
from .training import TrainProtocol

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 4
    kappa: float = 2.0
    eta1: float = 0.001
    kind: str = "geometric"


@dataclass(frozen=True)
class LossConfig:
    lambda_diff: float = 10.0
    lambda_ref: float = 200.0
    area_min: float = 10.0
    perceptual: str = "random_features"


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a run. Defaults are the desk-scale acceptance settings."""

    seed: int = 0
    deterministic: bool = False
    steps: int = 4  # sampling steps at inference
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    codec: CodecConfig = field(default_factory=CodecConfig)
    codec_epochs: int = 30
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    diffusion: TrainProtocol = field(
        default_factory=lambda: TrainProtocol(epochs=40, batch_size=8, lr=2e-3, schedule="constant_cosine", final_ratio=0.1)
    )
    refiner: RefinerConfig = field(default_factory=RefinerConfig)
    refinement: TrainProtocol = field(
        default_factory=lambda: TrainProtocol(epochs=60, batch_size=8, lr=1e-4, schedule="staged")
    )
    loss: LossConfig = field(default_factory=LossConfig)

    @property
    def patch_size(self) -> int:
        return self.dataset.patch_size

    def validate(self) -> None:
        try:
            self.codec.validate()
            self.refiner.validate()
            self.dataset.mask.validate()
            self.denoiser.validate(self.patch_size // self.codec.downsample_factor)
            TrainProtocol.lr_at(self.diffusion, 0.5)
            TrainProtocol.lr_at(self.refinement, 0.5)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.patch_size % self.codec.downsample_factor:
            raise ConfigError("patch size must be divisible by the codec factor")
        if self.patch_size % self.refiner.downsampling:
            raise ConfigError("patch size must be divisible by the refiner downsampling")
        if self.schedule.T < 1 or self.steps < 1:
            raise ConfigError("step counts must be positive")
        if self.steps > 2 * self.schedule.T and self.steps > 8:
            raise ConfigError("inference steps far beyond the trained schedule")
        if self.codec_epochs < 0 or self.diffusion.epochs < 0 or self.refinement.epochs < 0:
            raise ConfigError("epoch budgets must be nonnegative")
        if self.denoiser.latent_channels != self.codec.latent_channels:
            raise ConfigError("denoiser and codec disagree on latent channels")

    def replace(self, **flat) -> "RunConfig":
        """Copy with dotted-key overrides, e.g. ``cfg.replace(**{"codec.width": 8})``."""
        d = to_flat(self)
        for k, v in flat.items():
            if k not in d:
                raise ConfigError(f"unknown config key {k!r}")
            d[k] = v
        return from_flat(d)

    def digest(self) -> str:
        return config_digest(self)


def tiny_config(seed: int = 0) -> RunConfig:
    """Seconds-scale configuration for tests and smoke runs."""
    return RunConfig(seed=seed).replace(
        **{
            "dataset.n_scenes": 2,
            "dataset.scene_side": 64,
            "dataset.patch_size": 32,
            "codec.width": 8,
            "codec.depth": 1,
            "codec_epochs": 1,
            "denoiser.base_channels": 8,
            "denoiser.time_embedding_dim": 16,
            "diffusion.epochs": 1,
            "diffusion.batch_size": 4,
            "refiner.encoder_widths": (8, 16),
            "refiner.decoder_channels": (8, 8, 8),
            "refinement.epochs": 1,
            "refinement.batch_size": 4,
            "loss.perceptual": "null",
        }
    )


def full_protocol(seed: int = 0) -> RunConfig:
    """Full-length training protocol (epochs, batch sizes, peak learning rates)."""
    return RunConfig(seed=seed).replace(
        **{
            "diffusion.epochs": 200,
            "diffusion.lr": 1e-4,
            "diffusion.final_ratio": 0.5,
            "refinement.epochs": 1000,
            "refinement.batch_size": 32,
            "refinement.lr": 1e-4,
        }
    )


# ---------------------------------------------------------------- flat key-value form


def to_flat(obj, prefix: str = "") -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            out.update(to_flat(v, key + "."))
        else:
            out[key] = list(v) if isinstance(v, tuple) else v
    return out


def _coerce(value, default, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not float(value).is_integer():
            raise ConfigError(f"{key} must be an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if isinstance(default, tuple):
        return tuple(_coerce(x, default[0], key) if default else x for x in value)
    if isinstance(default, str):
        return str(value)
    return value


def _build(proto, flat: dict, prefix: str, used: set):
    """Copy of ``proto`` with the keys under ``prefix`` taken from ``flat``."""
    kwargs = {}
    for f in dataclasses.fields(proto):
        key = prefix + f.name
        default = getattr(proto, f.name)
        if dataclasses.is_dataclass(default):
            kwargs[f.name] = _build(default, flat, key + ".", used)
        elif key in flat:
            kwargs[f.name] = _coerce(flat[key], default, key)
            used.add(key)
    return dataclasses.replace(proto, **kwargs)


def from_flat(flat: dict) -> RunConfig:
    flat = dict(flat)
    version = flat.pop("config_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"config version {version} is not supported (expected {CONFIG_VERSION})")
    used: set = set()
    cfg = _build(RunConfig(), flat, "", used)
    unknown = sorted(set(flat) - used)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping of dotted keys")
    return from_flat(data)


def dump_config(cfg: RunConfig, path=None) -> str:
    text = yaml.safe_dump({"config_version": CONFIG_VERSION, **to_flat(cfg)}, sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text


def config_digest(cfg: RunConfig) -> str:
    """SHA-256 over the canonical JSON of the flat form; ``deterministic`` is excluded."""
    flat = to_flat(cfg)
    flat.pop("deterministic")
    return hashlib.sha256(json.dumps(flat, sort_keys=True).encode()).hexdigest()


__all__ = [
    "CONFIG_VERSION",
    "ConfigError",
    "LossConfig",
    "RunConfig",
    "ScheduleConfig",
    "StripeMaskSpec",
    "config_digest",
    "dump_config",
    "from_flat",
    "load_config",
    "full_protocol",
    "tiny_config",
    "to_flat",
]
