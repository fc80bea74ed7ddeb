"""Fixed feature extractors for the perceptual loss and the perceptual metric.

Every backbone maps frames ``(B, 3, H, W)`` in [0, 1] to a list of feature
maps, one per block. Backbones are never trained: parameters are frozen and
the module is kept in eval mode.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torchvision

from .container import ContainerError, read_container, write_container

WEIGHTS_KIND = "vidpred-backbone"

VGG16_BLOCK_ENDS = (4, 9, 16, 23, 30)
ALEXNET_BLOCK_ENDS = (2, 5, 8, 10, 12)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
# input scaling used by the calibrated perceptual metric (inputs first mapped to [-1, 1])
METRIC_SHIFT = (-0.030, -0.088, -0.188)
METRIC_SCALE = (0.458, 0.448, 0.450)


class WeightsError(ValueError):
    pass


class Backbone(nn.Module):
    name = "backbone"

    def freeze(self) -> "Backbone":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    def train(self, mode: bool = True):
        # frozen extractors stay in eval mode
        return super().train(False)


class IdentityBackbone(Backbone):
    """phi(x) = x; a single block whose 'features' are the RGB values."""

    name = "identity"

    def forward(self, x):
        return [x]


class StubBackbone(Backbone):
    """Seeded random conv stack: hermetic stand-in for a pretrained network.

    Block ``k`` is conv3x3 -> ReLU -> conv3x3 -> ReLU at 1/2^k resolution.
    """

    name = "stub"

    def __init__(self, seed: int = 0, widths: Sequence[int] = (16, 32, 64), scale: float = 1.0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        blocks = []
        c_prev = 3
        for c in widths:
            convs = [nn.Conv2d(c_prev, c, 3, 1, 1), nn.Conv2d(c, c, 3, 1, 1)]
            for conv in convs:
                fan_in = conv.in_channels * 9
                conv.weight.data = torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5
                conv.bias.data = torch.randn(conv.bias.shape, generator=gen) * 0.01
            blocks.append(nn.Sequential(convs[0], nn.ReLU(), convs[1], nn.ReLU()))
            c_prev = c
        self.blocks = nn.ModuleList(blocks)
        self.scale = scale
        self.seed = seed
        self.widths = tuple(widths)
        self.freeze()

    def forward(self, x):
        feats = []
        h = x - 0.5
        for i, blk in enumerate(self.blocks):
            if i:
                h = nn.functional.avg_pool2d(h, 2)
            h = blk(h)
            feats.append(h * self.scale)
        return feats


class _SlicedBackbone(Backbone):
    def __init__(self, features: nn.Sequential, ends: Sequence[int], blocks: Sequence[int] | None = None):
        super().__init__()
        self.features = features
        starts = (0, *ends[:-1])
        self.slices = list(zip(starts, ends))
        self.blocks = tuple(range(1, len(ends) + 1)) if blocks is None else tuple(blocks)
        self.freeze()

    def _prep(self, x):
        raise NotImplementedError

    def forward(self, x):
        h = self._prep(x)
        out = []
        for k, (a, b) in enumerate(self.slices, start=1):
            h = self.features[a:b](h)
            if k in self.blocks:
                out.append(h)
            if k >= max(self.blocks):
                break
        return out

    def load_weights(self, path: str | Path) -> "_SlicedBackbone":
        state = load_named_arrays(path)
        state = {k[len("features."):] if k.startswith("features.") else k: v for k, v in state.items()}
        own = self.features.state_dict()
        for k, v in own.items():
            if k not in state:
                raise WeightsError(f"weights file {path} lacks entry {k!r}")
            if tuple(state[k].shape) != tuple(v.shape):
                raise WeightsError(f"entry {k!r}: expected shape {tuple(v.shape)}, file has {tuple(state[k].shape)}")
        self.features.load_state_dict({k: torch.as_tensor(state[k]) for k in own})
        return self.freeze()


class VGG16Backbone(_SlicedBackbone):
    """VGG-16 conv stack; block l ends at the ReLU after its last conv."""

    name = "vgg16"

    def __init__(self, weights: str | Path | None = None, blocks: Sequence[int] | None = None):
        super().__init__(torchvision.models.vgg16(weights=None).features[:30], VGG16_BLOCK_ENDS, blocks)
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        if weights is not None:
            self.load_weights(weights)

    def _prep(self, x):
        return (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)


class AlexNetBackbone(_SlicedBackbone):
    """AlexNet conv stack with endpoints at relu1..relu5."""

    name = "alexnet"

    def __init__(self, weights: str | Path | None = None, blocks: Sequence[int] | None = None):
        super().__init__(torchvision.models.alexnet(weights=None).features, ALEXNET_BLOCK_ENDS, blocks)
        self.register_buffer("shift", torch.tensor(METRIC_SHIFT).view(1, 3, 1, 1))
        self.register_buffer("scale", torch.tensor(METRIC_SCALE).view(1, 3, 1, 1))
        if weights is not None:
            self.load_weights(weights)

    def _prep(self, x):
        return (2 * x - 1 - self.shift.to(x.dtype)) / self.scale.to(x.dtype)

    @property
    def channels(self) -> list[int]:
        return [self.features[b - 2].out_channels for _, b in self.slices]


class MetricBackbone(nn.Module):
    """Feature extractor plus non-negative per-channel weights for each block."""

    def __init__(self, backbone: Backbone, lin: Sequence[torch.Tensor] | None = None):
        super().__init__()
        self.backbone = backbone
        self.lin = None if lin is None else [torch.as_tensor(w, dtype=torch.float32).flatten() for w in lin]
        if self.lin is not None and any((w < 0).any() for w in self.lin):
            raise WeightsError("metric channel weights must be non-negative")

    def forward(self, x):
        return self.backbone(x)


def load_named_arrays(path: str | Path) -> dict[str, np.ndarray]:
    """Read our weights container, or a plain torch state-dict file."""
    path = Path(path)
    if not path.exists():
        raise WeightsError(f"weights file not found: {path}")
    if path.suffix == ".npz":
        try:
            arrays, _ = read_container(path, kind=WEIGHTS_KIND)
        except ContainerError as exc:
            raise WeightsError(str(exc)) from exc
        return arrays
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise WeightsError(f"cannot read weights file {path}: {exc}") from exc
    return {k: v.numpy() for k, v in state.items()}


def pack_weights(state: dict[str, torch.Tensor], path: str | Path, blocks: Sequence[str]) -> Path:
    """Store a state dict in the checksummed container (manifest lists block names)."""
    arrays = {k: v.detach().cpu().numpy() for k, v in state.items()}
    return write_container(path, arrays, kind=WEIGHTS_KIND, meta={"blocks": list(blocks)})


def load_lin_weights(path: str | Path, n_blocks: int = 5) -> list[torch.Tensor]:
    """Per-block channel weights, keyed ``lin{k}...weight`` (k = 0..n_blocks-1)."""
    arrays = load_named_arrays(path)
    out = []
    for k in range(n_blocks):
        keys = [n for n in arrays if n.startswith(f"lin{k}.") and n.endswith("weight")]
        if len(keys) != 1:
            raise WeightsError(f"weights file {path}: expected one 'lin{k}.*weight' entry, found {keys}")
        out.append(torch.as_tensor(arrays[keys[0]]).flatten())
    return out


def make_backbone(kind: str, weights: str | Path | None = None, seed: int = 0) -> Backbone:
    if kind == "stub":
        return StubBackbone(seed)
    if kind == "identity":
        return IdentityBackbone()
    if kind == "vgg16":
        if weights is None:
            raise WeightsError("the vgg16 perceptual backbone needs a weights file")
        return VGG16Backbone(weights)
    raise ValueError(f"unknown backbone {kind!r}")


def make_metric(kind: str, weights: str | Path | None = None, lin_weights: str | Path | None = None,
                seed: int = 0) -> MetricBackbone:
    """``stub`` (hermetic, unit channel weights) or ``pretrained`` (AlexNet + lin weights)."""
    if kind == "stub":
        return MetricBackbone(StubBackbone(seed))
    if kind == "pretrained":
        if weights is None or lin_weights is None:
            raise WeightsError("pretrained metric needs both backbone and lin weight files")
        return MetricBackbone(AlexNetBackbone(weights), load_lin_weights(lin_weights))
    raise ValueError(f"unknown metric backbone {kind!r}")
