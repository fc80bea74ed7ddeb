"""Run configuration: model, optimiser, phase schedule and presets.

Config files are JSON with the same nesting as :meth:`TrainConfig.to_dict`::

    {"generator": {"channels": [8, 16, 32, 64], ...},
     "discriminator": {...}, "optimizer": {...}, "schedule": {...},
     "data": {...}, "backbone": "stub", "seed": 0}
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .discriminator import DiscriminatorConfig
from .generator import GeneratorConfig, NoiseSpec
from .losses import VARIANTS, ObjectiveWeights


@dataclass
class OptimizerSettings:
    algorithm: str = "adam"
    beta1: float = 0.0
    beta2: float = 0.9
    batch_size: int = 8
    lr_phase1_g: float = 1e-4
    lr_phase2_d: float = 1e-4
    lr_phase3_g: float = 2e-5
    lr_phase3_d: float = 1e-4
    d_updates_per_g: int = 8
    grad_clip: float | None = None
    flip_p: float = 0.5

    def __post_init__(self):
        if self.algorithm != "adam":
            raise ValueError("only Adam is supported")
        lrs = (self.lr_phase1_g, self.lr_phase2_d, self.lr_phase3_g, self.lr_phase3_d)
        if min(lrs) <= 0:
            raise ValueError("learning rates must be > 0")
        if self.d_updates_per_g < 1:
            raise ValueError("d_updates_per_g must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class PhaseSchedule:
    """Step counts per phase. Phase 3 counts generator updates."""

    phase1_steps: int = 0
    phase2_steps: int = 0
    phase3_steps: int = 0
    variant: str = "GAN-VGG"
    epochs: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.epochs is not None:
            self.epochs = tuple(int(e) for e in self.epochs)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if min(self.phase1_steps, self.phase2_steps, self.phase3_steps) < 0:
            raise ValueError("phase step counts must be >= 0")

    @property
    def adversarial(self) -> bool:
        return self.variant.startswith("GAN")

    def phases(self) -> list[int]:
        return [1, 2, 3] if self.adversarial else [1]

    def steps(self, phase: int) -> int:
        return (self.phase1_steps, self.phase2_steps, self.phase3_steps)[phase - 1]

    def resolved(self, n_samples: int, batch_size: int, d_updates_per_g: int = 8) -> "PhaseSchedule":
        """Step counts derived from ``epochs`` when set, else ``self``."""
        if self.epochs is None:
            return self
        return PhaseSchedule.from_epochs(self.variant, n_samples, batch_size, self.epochs, d_updates_per_g)

    @classmethod
    def from_epochs(cls, variant: str, n_samples: int, batch_size: int, epochs=(50, 2, 20),
                    d_updates_per_g: int = 8) -> "PhaseSchedule":
        per_epoch = max(1, n_samples // batch_size)
        return cls(epochs[0] * per_epoch, epochs[1] * per_epoch,
                   max(1, epochs[2] * per_epoch // (d_updates_per_g + 1)), variant)


@dataclass
class DataSettings:
    frame_hw: tuple[int, int] = (128, 160)
    temporal_factor: int = 1
    train_sequences: int = 0
    train_length: int = 20
    pans: tuple[int, ...] = (1, 2)


@dataclass
class TrainConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    schedule: PhaseSchedule = field(default_factory=PhaseSchedule)
    data: DataSettings = field(default_factory=DataSettings)
    backbone: str = "stub"
    backbone_weights: str | None = None
    seed: int = 0
    sample_every: int = 0
    ckpt_every: int = 0

    @property
    def weights(self) -> ObjectiveWeights:
        return ObjectiveWeights.for_variant(self.schedule.variant)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = copy.deepcopy(d)
        gen = d.pop("generator", {})
        if "noise" in gen and isinstance(gen["noise"], dict):
            gen["noise"] = NoiseSpec(**gen["noise"])
        data = d.pop("data", {})
        for k in ("frame_hw", "pans"):
            if k in data:
                data[k] = tuple(data[k])
        return cls(generator=GeneratorConfig(**gen),
                   discriminator=DiscriminatorConfig(**d.pop("discriminator", {})),
                   optimizer=OptimizerSettings(**d.pop("optimizer", {})),
                   schedule=PhaseSchedule(**d.pop("schedule", {})),
                   data=DataSettings(**data), **d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


PRESETS: dict[str, dict] = {
    "desk": {
        "generator": {"channels": [8, 16, 32, 64], "input_hw": [64, 80]},
        "discriminator": {"stage_channels": [8, 16, 32, 64, 128]},
        "optimizer": {"lr_phase1_g": 1e-3, "lr_phase2_d": 2e-4, "lr_phase3_g": 1e-4, "lr_phase3_d": 2e-4},
        "schedule": {"phase1_steps": 1200, "phase2_steps": 100, "phase3_steps": 40},
        "data": {"frame_hw": [64, 80], "train_sequences": 96, "train_length": 20, "pans": [1, 2]},
        "backbone": "stub",
    },
    "paper": {
        "generator": {"channels": [64, 128, 256, 512], "input_hw": [128, 160]},
        "discriminator": {"stage_channels": [64, 128, 512, 1024, 2048]},
        "schedule": {"epochs": [50, 2, 20]},
        "data": {"frame_hw": [128, 160]},
        "backbone": "vgg16",
    },
}


def resolve_config(preset: str = "desk", config_path: str | Path | None = None,
                   overrides: dict | None = None) -> TrainConfig:
    """Preset, then config file, then explicit overrides; later layers win."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    d = TrainConfig().to_dict()
    d = _merge(d, PRESETS[preset])
    if config_path is not None:
        d = _merge(d, json.loads(Path(config_path).read_text()))
    if overrides:
        d = _merge(d, overrides)
    return TrainConfig.from_dict(d)
