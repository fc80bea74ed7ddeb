"""Conditional patch discriminator.

The candidate frame is appended to the 8-frame conditioning clip along time,
passed through five stages of residual blocks (3-D convs, spectral norm, no
batch norm), each followed by 2x spatial average pooling; the time axis is
then averaged away and a 1x1 conv gives one logit per patch.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm as _sn


@dataclass
class DiscriminatorConfig:
    stage_blocks: tuple[int, ...] = (1, 2, 2, 2, 2)
    stage_channels: tuple[int, ...] = (64, 128, 512, 1024, 2048)
    spectral_norm: bool = True
    kernel: int = 3

    def __post_init__(self):
        self.stage_blocks = tuple(int(b) for b in self.stage_blocks)
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.stage_blocks) != len(self.stage_channels):
            raise ValueError("stage_blocks and stage_channels must have equal length")
        if any(b < 1 for b in self.stage_blocks):
            raise ValueError("every stage needs at least one block")
        if any(b <= a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ValueError("stage_channels must be strictly increasing")

    @property
    def stride(self) -> int:
        return 2 ** len(self.stage_channels)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiscriminatorConfig":
        return cls(**d)


def patch_grid(hw: tuple[int, int], cfg: DiscriminatorConfig) -> tuple[int, int]:
    h, w = hw
    s = cfg.stride
    if h % s or w % s:
        raise ValueError(f"frame size {h}x{w} not divisible by total stride {s}")
    return h // s, w // s


class ResidualBlockD(nn.Module):
    """``y = skip(x) + conv2(relu(conv1(relu(x))))``; skip is identity or a 1x1x1 projection."""

    def __init__(self, c_in: int, c_out: int, sn: bool = True, k: int = 3):
        super().__init__()
        wrap = _sn if sn else (lambda m: m)
        self.conv1 = wrap(nn.Conv3d(c_in, c_out, k, 1, k // 2))
        self.conv2 = wrap(nn.Conv3d(c_out, c_out, k, 1, k // 2))
        self.skip = None if c_in == c_out else wrap(nn.Conv3d(c_in, c_out, 1, bias=False))

    def forward(self, x):
        h = self.conv2(F.relu(self.conv1(F.relu(x))))
        return h + (x if self.skip is None else self.skip(x))


def residual_block_d(x: torch.Tensor, block: ResidualBlockD) -> torch.Tensor:
    return block(x)


class Discriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig | None = None):
        super().__init__()
        self.cfg = cfg or DiscriminatorConfig()
        stages = []
        c_prev = 3
        for n, c in zip(self.cfg.stage_blocks, self.cfg.stage_channels):
            blocks = []
            for i in range(n):
                blocks.append(ResidualBlockD(c_prev if i == 0 else c, c, self.cfg.spectral_norm, self.cfg.kernel))
            stages.append(nn.Sequential(*blocks))
            c_prev = c
        self.stages = nn.ModuleList(stages)
        final = nn.Conv2d(c_prev, 1, 1)
        self.final = _sn(final) if self.cfg.spectral_norm else final

    def forward(self, candidate: torch.Tensor, clip: torch.Tensor) -> torch.Tensor:
        """``candidate (B, 3, H, W)``, ``clip (B, 3, T, H, W)`` -> logits ``(B, N, M)``."""
        if candidate.dim() == 4:
            candidate = candidate.unsqueeze(2)
        if candidate.shape[-2:] != clip.shape[-2:]:
            raise ValueError(f"candidate size {tuple(candidate.shape[-2:])} != clip size {tuple(clip.shape[-2:])}")
        patch_grid(clip.shape[-2:], self.cfg)
        h = torch.cat([clip, candidate], dim=2)
        for stage in self.stages:
            h = F.avg_pool3d(stage(h), (1, 2, 2))
        h = F.relu(h.mean(dim=2))
        return self.final(h)[:, 0]

    def final_weight(self) -> torch.Tensor:
        return self.final.weight


def discriminate(candidate: torch.Tensor, clip: torch.Tensor, disc: Discriminator) -> torch.Tensor:
    squeeze = clip.dim() == 4
    if squeeze:
        candidate, clip = candidate.unsqueeze(0), clip.unsqueeze(0)
    out = disc(candidate, clip)
    return out[0] if squeeze else out


def spectral_norm_layers(disc: nn.Module) -> list[tuple[str, nn.Module]]:
    return [(name, m) for name, m in disc.named_modules()
            if isinstance(m, (nn.Conv2d, nn.Conv3d)) and hasattr(m, "parametrizations")]
