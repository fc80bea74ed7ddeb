"""Hierarchical residual next-frame generator.

Each level ``l`` has a bottom-up block (BU) that halves the spatial size, a
chain of three lateral blocks (LAT) that collapses the remaining time axis to
a single predicted state, and two top-down blocks (TD) that upsample the
state (concatenated with the top-down output of the level above) back to
the resolution of the level below. ``d_1`` goes through a 3x3 conv and a
sigmoid to give the predicted frame.

Tensors are laid out ``(batch, channels, time, height, width)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

INPUT_T = 8


class ConfigError(ValueError):
    pass


@dataclass
class NoiseSpec:
    mode: str = "dropout"
    rate: float = 0.5
    levels_applied: tuple[int, ...] = (3, 4)
    active_at_inference: bool = True
    enabled: bool = True

    def __post_init__(self):
        if self.mode != "dropout":
            raise ConfigError(f"unsupported noise mode {self.mode!r}")
        if not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"noise rate must be in [0, 1), got {self.rate}")
        self.levels_applied = tuple(self.levels_applied)


@dataclass
class GeneratorConfig:
    channels: tuple[int, ...] = (64, 128, 256, 512)
    input_t: int = INPUT_T
    temporal_strides: tuple[int, ...] = (1, 2, 2, 2)
    kernel_t: int = 3
    kernel_s: int = 3
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    out_activation: str = "sigmoid"
    input_hw: tuple[int, int] | None = None

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.temporal_strides = tuple(int(s) for s in self.temporal_strides)
        if isinstance(self.noise, dict):
            self.noise = NoiseSpec(**self.noise)
        if self.input_hw is not None:
            self.input_hw = tuple(self.input_hw)
        self.validate()

    @property
    def levels(self) -> int:
        return len(self.channels)

    def temporal_extents(self) -> list[int]:
        """Time extent of u_0 .. u_L."""
        ext = [self.input_t]
        for st in self.temporal_strides:
            ext.append((ext[-1] - 1) // st + 1)
        return ext

    def validate(self) -> None:
        if len(self.temporal_strides) != self.levels:
            raise ConfigError("temporal_strides must have one entry per level")
        if self.levels < 1 or min(self.channels) < 1:
            raise ConfigError("channels must be a non-empty tuple of positive widths")
        if any(s < 1 for s in self.temporal_strides):
            raise ConfigError("temporal strides must be >= 1")
        if self.kernel_s % 2 == 0 or self.kernel_t % 2 == 0:
            raise ConfigError("kernel sizes must be odd")
        if self.out_activation != "sigmoid":
            raise ConfigError("only the sigmoid output head is supported")
        bad = [l for l in self.noise.levels_applied if not 1 <= l <= self.levels]
        if bad:
            raise ConfigError(f"noise levels {bad} outside 1..{self.levels}")
        if self.input_hw is not None:
            check_frame_size(self.input_hw, self.levels)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**d)


def check_frame_size(hw, levels: int) -> None:
    f = 2 ** levels
    h, w = hw
    if h % f or w % f or h <= 0 or w <= 0:
        raise ConfigError(f"frame size {h}x{w} is not divisible by {f} ({levels} 2x downscales)")


def lateral_kernels(extent: int, n_blocks: int = 3) -> list[int]:
    """Temporal kernel per LAT block so unpadded convs take ``extent`` down to 1."""
    r = extent - 1
    return [1 + r // n_blocks + (1 if i < r % n_blocks else 0) for i in range(n_blocks)]


@dataclass
class FeatureVolume:
    data: torch.Tensor
    level: int

    @property
    def shape(self):
        return tuple(self.data.shape)


# ---------------------------------------------------------------------------
# Pixel shuffler
# ---------------------------------------------------------------------------

_DIMS = {"c": 1, "t": 2}


def pixel_shuffle(x: torch.Tensor, from_dim: str = "c", to_dim: str = "s", r: int = 2) -> torch.Tensor:
    """Subpixel rearrangement of channel groups into space or time.

    ``c -> s``: ``(B, C*r*r, [T,] H, W) -> (B, C, [T,] H*r, W*r)`` where channel
    ``c*r*r + i*r + j`` lands on sub-position ``(i, j)``.
    ``c -> t``: ``(B, C*r, T, H, W) -> (B, C, T*r, H, W)``.
    """
    if from_dim != "c" or to_dim not in ("s", "t"):
        raise ValueError(f"unsupported shuffle {from_dim}->{to_dim}")
    if r == 1:
        return x
    b, c = x.shape[:2]
    rest = x.shape[2:]
    if to_dim == "s":
        if c % (r * r):
            raise ValueError(f"channel count {c} not divisible by r^2={r * r}")
        *lead, h, w = rest
        y = x.reshape(b, c // (r * r), r, r, *lead, h, w)
        n = len(lead)
        # (b, c', i, j, *lead, h, w) -> (b, c', *lead, h, i, w, j)
        perm = [0, 1, *range(4, 4 + n), 4 + n, 2, 5 + n, 3]
        return y.permute(perm).reshape(b, c // (r * r), *lead, h * r, w * r)
    if x.dim() != 5:
        raise ValueError("channel->time shuffle needs a (B, C, T, H, W) input")
    if c % r:
        raise ValueError(f"channel count {c} not divisible by r={r}")
    t, h, w = rest
    y = x.reshape(b, c // r, r, t, h, w).permute(0, 1, 3, 2, 4, 5)
    return y.reshape(b, c // r, t * r, h, w)


def pixel_unshuffle(y: torch.Tensor, from_dim: str = "s", to_dim: str = "c", r: int = 2) -> torch.Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    if to_dim != "c" or from_dim not in ("s", "t"):
        raise ValueError(f"unsupported unshuffle {from_dim}->{to_dim}")
    if r == 1:
        return y
    b, c = y.shape[:2]
    if from_dim == "s":
        *lead, hr, wr = y.shape[2:]
        if hr % r or wr % r:
            raise ValueError(f"spatial size {hr}x{wr} not divisible by r={r}")
        h, w = hr // r, wr // r
        n = len(lead)
        x = y.reshape(b, c, *lead, h, r, w, r)
        perm = [0, 1, 3 + n, 5 + n, *range(2, 2 + n), 2 + n, 4 + n]
        return x.permute(perm).reshape(b, c * r * r, *lead, h, w)
    t_r, h, w = y.shape[2:]
    if t_r % r:
        raise ValueError(f"time extent {t_r} not divisible by r={r}")
    x = y.reshape(b, c, t_r // r, r, h, w).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, c * r, t_r // r, h, w)


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------

class DropoutNoise(nn.Module):
    """Dropout used as the noise source; draws masks from an explicit torch.Generator."""

    def __init__(self, rate: float, active_at_inference: bool = True):
        super().__init__()
        self.rate = rate
        self.active_at_inference = active_at_inference
        self.enabled = True

    def forward(self, x: torch.Tensor, rng: torch.Generator | None = None) -> torch.Tensor:
        if not self.enabled or self.rate == 0.0:
            return x
        if not self.training and not self.active_at_inference:
            return x
        keep = torch.rand(x.shape, generator=rng, device=x.device, dtype=x.dtype) >= self.rate
        return x * keep / (1.0 - self.rate)


def _init_conv(m: nn.Module) -> None:
    nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
    if m.bias is not None:
        nn.init.zeros_(m.bias)


class BottomUpBlock(nn.Module):
    """Strided Conv3 + BN + ReLU with a strided 1x1x1 projection skip."""

    def __init__(self, c_in: int, c_out: int, t_stride: int, k_t: int = 3, k_s: int = 3):
        super().__init__()
        stride = (t_stride, 2, 2)
        self.conv = nn.Conv3d(c_in, c_out, (k_t, k_s, k_s), stride, (k_t // 2, k_s // 2, k_s // 2), bias=False)
        self.bn = nn.BatchNorm3d(c_out)
        self.skip = nn.Conv3d(c_in, c_out, 1, stride, bias=False)
        _init_conv(self.conv)
        _init_conv(self.skip)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)) + self.skip(x))


class LateralBlock(nn.Module):
    """Conv3 with unpadded time (shrinks T by k_t - 1); skip keeps the latest frames."""

    def __init__(self, channels: int, k_t: int, k_s: int = 3):
        super().__init__()
        self.k_t = k_t
        self.conv = nn.Conv3d(channels, channels, (k_t, k_s, k_s), 1, (0, k_s // 2, k_s // 2), bias=False)
        self.bn = nn.BatchNorm3d(channels)
        _init_conv(self.conv)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)) + x[:, :, self.k_t - 1:])


class TopDownBlock(nn.Module):
    """Residual Conv2 + BN (+ dropout noise) + ReLU at fixed resolution."""

    def __init__(self, channels: int, noise: DropoutNoise | None, k_s: int = 3):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, k_s, 1, k_s // 2, bias=False)
        self.bn = nn.BatchNorm2d(channels)
        self.noise = noise
        _init_conv(self.conv)

    def forward(self, x, rng=None):
        h = self.bn(self.conv(x))
        if self.noise is not None:
            h = self.noise(h, rng)
        return F.relu(h + x)


class UpsampleBlock(nn.Module):
    """1x1 conv + pixel shuffle (r=2), then a residual Conv2 + BN (+ noise) + ReLU."""

    def __init__(self, c_in: int, c_out: int, noise: DropoutNoise | None, k_s: int = 3, r: int = 2):
        super().__init__()
        self.r = r
        self.expand = nn.Conv2d(c_in, c_out * r * r, 1, bias=False)
        self.conv = nn.Conv2d(c_out, c_out, k_s, 1, k_s // 2, bias=False)
        self.bn = nn.BatchNorm2d(c_out)
        self.noise = noise
        _init_conv(self.expand)
        _init_conv(self.conv)

    def forward(self, x, rng=None):
        u = pixel_shuffle(self.expand(x), "c", "s", self.r)
        h = self.bn(self.conv(u))
        if self.noise is not None:
            h = self.noise(h, rng)
        return F.relu(h + u)


class Level(nn.Module):
    def __init__(self, cfg: GeneratorConfig, l: int):
        super().__init__()
        ch = cfg.channels
        c_in = 3 if l == 1 else ch[l - 2]
        c = ch[l - 1]
        ext = cfg.temporal_extents()[l]
        self.level = l
        self.bu = BottomUpBlock(c_in, c, cfg.temporal_strides[l - 1], cfg.kernel_t, cfg.kernel_s)
        self.lat = nn.ModuleList(LateralBlock(c, k, cfg.kernel_s) for k in lateral_kernels(ext))
        c_state = c if l == cfg.levels else 2 * c
        c_down = ch[max(l - 2, 0)]
        noisy = cfg.noise.enabled and l in cfg.noise.levels_applied

        def mk_noise():
            return DropoutNoise(cfg.noise.rate, cfg.noise.active_at_inference) if noisy else None

        self.td1 = TopDownBlock(c_state, mk_noise(), cfg.kernel_s)
        self.td2 = UpsampleBlock(c_state, c_down, mk_noise(), cfg.kernel_s)
        self.out_channels = c_down


def bottom_up(u_prev: torch.Tensor, level: Level) -> torch.Tensor:
    return level.bu(u_prev)


def lateral_predict(u_l: torch.Tensor, d_above: torch.Tensor | None, level: Level) -> torch.Tensor:
    """``s_l = [LAT3(LAT2(LAT1(u_l))), d_{l+1}]`` as a 2-D map ``(B, C, h, w)``."""
    h = u_l
    for blk in level.lat:
        h = blk(h)
    if h.shape[2] != 1:
        raise ConfigError(f"lateral chain left time extent {h.shape[2]} at level {level.level}")
    s = h[:, :, 0]
    if d_above is None:
        return s
    if d_above.shape[-2:] != s.shape[-2:]:
        raise ValueError(f"top-down input {tuple(d_above.shape[-2:])} does not match "
                         f"lateral output {tuple(s.shape[-2:])} at level {level.level}")
    return torch.cat([s, d_above], dim=1)


def top_down(s_l: torch.Tensor, level: Level, rng: torch.Generator | None = None) -> torch.Tensor:
    if s_l.dim() == 5:
        if s_l.shape[2] != 1:
            raise ValueError("top-down input must have time extent 1")
        s_l = s_l[:, :, 0]
    return level.td2(level.td1(s_l, rng), rng)


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig | None = None):
        super().__init__()
        self.cfg = cfg or GeneratorConfig()
        self.levels = nn.ModuleList(Level(self.cfg, l) for l in range(1, self.cfg.levels + 1))
        self.head = nn.Conv2d(self.cfg.channels[0], 3, 3, 1, 1)
        nn.init.kaiming_normal_(self.head.weight, mode="fan_in", nonlinearity="linear")
        self.head.weight.data.mul_(0.1)
        nn.init.zeros_(self.head.bias)

    def set_noise(self, enabled: bool) -> None:
        for m in self.modules():
            if isinstance(m, DropoutNoise):
                m.enabled = enabled

    def check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 5 or x.shape[1] != 3 or x.shape[2] != self.cfg.input_t:
            raise ValueError(f"expected clip (B, 3, {self.cfg.input_t}, H, W), got {tuple(x.shape)}")
        check_frame_size(x.shape[-2:], self.cfg.levels)
        if self.cfg.input_hw is not None and tuple(x.shape[-2:]) != self.cfg.input_hw:
            raise ValueError(f"generator built for {self.cfg.input_hw}, got {tuple(x.shape[-2:])}")

    def feature_volumes(self, x: torch.Tensor, rng=None) -> dict[str, list[FeatureVolume]]:
        """All intermediate u_l, s_l, d_l (for inspection and shape tests)."""
        self.check_input(x)
        us = [x]
        for lv in self.levels:
            us.append(bottom_up(us[-1], lv))
        ss, ds = {}, {}
        d = None
        for lv in reversed(self.levels):
            s = lateral_predict(us[lv.level], d, lv)
            d = top_down(s, lv, rng)
            ss[lv.level], ds[lv.level] = s, d
        L = self.cfg.levels
        return {
            "u": [FeatureVolume(us[l], l) for l in range(1, L + 1)],
            "s": [FeatureVolume(ss[l].unsqueeze(2), l) for l in range(1, L + 1)],
            "d": [FeatureVolume(ds[l].unsqueeze(2), l - 1) for l in range(1, L + 1)],
        }

    def forward(self, x: torch.Tensor, rng: torch.Generator | None = None) -> torch.Tensor:
        """``(B, 3, 8, H, W)`` clip -> ``(B, 3, H, W)`` next frame in (0, 1)."""
        self.check_input(x)
        u = x
        us = []
        for lv in self.levels:
            u = bottom_up(u, lv)
            us.append(u)
        d = None
        for lv, u in zip(reversed(self.levels), reversed(us)):
            d = top_down(lateral_predict(u, d, lv), lv, rng)
        return torch.sigmoid(self.head(d))

    def generate_next_frame(self, clip: torch.Tensor, rng: torch.Generator | None = None) -> torch.Tensor:
        squeeze = clip.dim() == 4
        y = self(clip.unsqueeze(0) if squeeze else clip, rng)
        return y[0] if squeeze else y

    def rollout(self, clip: torch.Tensor, n_steps: int, rng: torch.Generator | None = None) -> torch.Tensor:
        return rollout(lambda x: self(x, rng), clip, n_steps, self.cfg.input_t)


def rollout(predict: Callable[[torch.Tensor], torch.Tensor], clip: torch.Tensor, n_steps: int,
            input_t: int = INPUT_T) -> torch.Tensor:
    """Recursive prediction; returns ``(B, 3, n_steps, H, W)`` (unbatched in, unbatched out).

    Step k sees the last ``input_t`` frames of the clip followed by predictions 1..k-1.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    squeeze = clip.dim() == 4
    frames = clip.unsqueeze(0) if squeeze else clip
    preds = []
    for _ in range(n_steps):
        y = predict(frames[:, :, -input_t:])
        preds.append(y)
        frames = torch.cat([frames[:, :, -(input_t - 1):], y.unsqueeze(2)], dim=2)
    out = torch.stack(preds, dim=2)
    return out[0] if squeeze else out
