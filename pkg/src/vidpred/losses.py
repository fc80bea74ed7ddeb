"""Generator and discriminator objectives.

Reductions: MAE is a per-element mean; the perceptual term normalises each
feature vector to unit length, sums squared differences over channels,
averages over spatial sites and sums over blocks. Patch logits enter the
adversarial terms through their mean.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

EPS = 1e-10

VARIANTS = ("GAN-VGG", "G-VGG", "GAN-MAE", "G-MAE")


@dataclass
class ObjectiveWeights:
    adv: float = 1.0
    mae: float = 1000.0
    perceptual: float = 400.0

    def __post_init__(self):
        if min(self.adv, self.mae, self.perceptual) < 0:
            raise ValueError("loss weights must be non-negative")

    @classmethod
    def for_variant(cls, variant: str) -> "ObjectiveWeights":
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
        return cls(adv=1.0 if variant.startswith("GAN") else 0.0,
                   perceptual=400.0 if variant.endswith("VGG") else 0.0)


@dataclass
class LossValue:
    scalar: torch.Tensor
    components: dict[str, torch.Tensor] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)

    def as_log(self) -> dict[str, float]:
        out = {k: float(v.detach()) for k, v in self.components.items()}
        out["total"] = float(self.scalar.detach())
        return out


def _check_same(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def mae_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_same(pred, target)
    return (pred - target).abs().mean()


def unit_normalize(f: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Scale each channel vector (dim 1) to unit L2 norm."""
    return f / (torch.linalg.vector_norm(f, dim=1, keepdim=True) + eps)


def feature_distance(feats_a, feats_b, lin=None, eps: float = EPS) -> torch.Tensor:
    """Per-sample distance between two feature lists; ``lin`` optionally weights channels."""
    total = 0.0
    for k, (fa, fb) in enumerate(zip(feats_a, feats_b)):
        diff = (unit_normalize(fa, eps) - unit_normalize(fb, eps)) ** 2
        if lin is not None:
            diff = diff * lin[k].to(diff).view(1, -1, 1, 1)
        total = total + diff.sum(dim=1).mean(dim=(-2, -1))
    return total


def perceptual_loss(pred: torch.Tensor, target: torch.Tensor, backbone, reduction: str = "mean") -> torch.Tensor:
    """Frames ``(B, 3, H, W)``; ``reduction='none'`` returns one value per sample."""
    _check_same(pred, target)
    if pred.dim() == 3:
        pred, target = pred.unsqueeze(0), target.unsqueeze(0)
    d = feature_distance(backbone(pred), backbone(target))
    return d if reduction == "none" else d.mean()


def hinge_loss_d(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    return F.relu(1.0 - real_logits).mean() + F.relu(1.0 + fake_logits).mean()


def hinge_loss_g(fake_logits: torch.Tensor) -> torch.Tensor:
    return -fake_logits.mean()


def generator_objective(pred: torch.Tensor, target: torch.Tensor, fake_logits: torch.Tensor | None,
                        weights: ObjectiveWeights, backbone=None) -> LossValue:
    """Weighted sum of the active terms; a term with zero weight (or no input) is left out.

    The total is accumulated in float64 so that it equals the weighted sum of
    the logged components exactly.
    """
    comps: dict[str, torch.Tensor] = {}
    used: dict[str, float] = {}
    if weights.adv > 0 and fake_logits is not None:
        comps["adv"] = hinge_loss_g(fake_logits)
        used["adv"] = weights.adv
    if weights.mae > 0:
        comps["mae"] = mae_loss(pred, target)
        used["mae"] = weights.mae
    if weights.perceptual > 0:
        if backbone is None:
            raise ValueError("perceptual weight > 0 but no backbone given")
        comps["perceptual"] = perceptual_loss(pred, target, backbone)
        used["perceptual"] = weights.perceptual
    total = torch.zeros((), dtype=torch.float64, device=pred.device)
    for k in ("adv", "mae", "perceptual"):
        if k in comps:
            total = total + used[k] * comps[k].double()
    return LossValue(total, comps, used)
