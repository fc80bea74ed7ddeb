"""Hierarchical residual next-frame prediction with a conditional patch discriminator."""

from .config import PRESETS, TrainConfig, resolve_config
from .discriminator import Discriminator, DiscriminatorConfig
from .generator import Generator, GeneratorConfig, NoiseSpec

__version__ = "0.1.0"

__all__ = ["Discriminator", "DiscriminatorConfig", "Generator", "GeneratorConfig", "NoiseSpec",
           "PRESETS", "TrainConfig", "resolve_config"]
