"""Run configuration: nested dataclass blocks with strict JSON loading.

Stage defaults follow the published training recipe where one exists
(customization lr 1e-5 / batch 2 / 100 epochs, DDIM 50 steps, guidance 6.0,
loss-weight profiles 0.75/0.5 and 0.25/0.25); everything else is sized for a
desktop CPU. Unknown keys are rejected so config drift fails loudly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

LAMBDA_PROFILES = {1: (0.75, 0.5), 2: (0.25, 0.25)}


@dataclass
class DataConfig:
    n_existing: int = 6
    n_new: int = 3
    pretrain_stories: int = 2000
    test_stories_per_character: int = 40
    existing_test_stories: int = 40


@dataclass
class ModelConfig:
    d_cond: int = 128
    d_time: int = 64
    unet_base: int = 32
    history_width: int = 16
    latent_channels: int = 12
    latent_size: int = 16
    n_characters: int = 9
    n_existing: int = 6
    n_actions: int = 6
    n_backgrounds: int = 4


@dataclass
class DiffusionConfig:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    steps: int = 50
    guidance_scale: float = 6.0
    clip_latents: bool = True


@dataclass
class PretrainConfig:
    epochs: int = 10
    batch: int = 16
    lr: float = 2e-3
    dropout: float = 0.1


@dataclass
class CustomizeConfig:
    epochs: int = 100
    batch: int = 2
    lr: float = 1e-5
    lr_disc: float = 1e-4
    lr_new_embed: float = 5e-3
    lambda1: float = 0.75
    lambda2: float = 0.5
    refs_per_character: int = 3
    reg_stories: int = 8


@dataclass
class EvaluateConfig:
    pooled: bool = False
    include_existing: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    customize: CustomizeConfig = field(default_factory=CustomizeConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)

    def resolved(self) -> "RunConfig":
        """Propagate data-derived sizes into the model block."""
        self.model.n_characters = self.data.n_existing + self.data.n_new
        self.model.n_existing = self.data.n_existing
        return self

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def _apply(block, values: dict, path: str) -> None:
    names = {f.name: f for f in dataclasses.fields(block)}
    for key, val in values.items():
        if key not in names:
            raise ConfigError(f"unknown config key {path}{key!r}")
        f = names[key]
        if dataclasses.is_dataclass(f.type) or dataclasses.is_dataclass(getattr(block, key)):
            if not isinstance(val, dict):
                raise ConfigError(f"config block {path}{key!r} must be an object")
            _apply(getattr(block, key), val, f"{path}{key}.")
        else:
            setattr(block, key, type(getattr(block, key))(val))


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        with open(path) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ConfigError("config file must contain a JSON object")
        _apply(cfg, data, "")
    if overrides:
        _apply(cfg, overrides, "")
    return cfg.resolved()


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_json(), fh, indent=2, sort_keys=True)
