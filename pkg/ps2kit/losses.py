"""Training objectives.

All image losses are masked means: the mask is applied before reduction (and
before feature extraction for the perceptual term), so pixels outside the
object never change a loss value.
"""

from dataclasses import dataclass
from typing import Dict, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import PS2Config
from .errors import ConfigError, EmptyMaskError, ShapeError
from .logger import logger

# index of each named activation inside torchvision's vgg19().features
VGG19_LAYERS = {
    "relu1_1": 1, "relu1_2": 3,
    "relu2_1": 6, "relu2_2": 8,
    "relu3_1": 11, "relu3_2": 13, "relu3_3": 15, "relu3_4": 17,
    "relu4_1": 20, "relu4_2": 22, "relu4_3": 24, "relu4_4": 26,
    "relu5_1": 29,
}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class LossWeights:
    l1: float = 0.5
    l2: float = 0.5
    perp: float = 1.0

    def __post_init__(self):
        if min(self.l1, self.l2, self.perp) < 0:
            raise ConfigError("loss weights must be nonnegative")

    @classmethod
    def from_config(cls, cfg: PS2Config) -> "LossWeights":
        return cls(cfg.lambda_l1, cfg.lambda_l2, cfg.lambda_perp)


class PerceptualExtractor(nn.Module):
    """Frozen VGG-19 truncated at one activation layer."""

    def __init__(self, layer: str = "relu3_1", pretrained: bool = True):
        super().__init__()
        from torchvision.models import VGG19_Weights, vgg19
        from torchvision.models.vgg import cfgs, make_layers

        if layer not in VGG19_LAYERS:
            raise ConfigError(f"unknown perceptual layer {layer!r}")
        features = None
        if pretrained:
            try:
                features = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features
            except Exception as e:
                logger.warning(f"Pretrained VGG-19 weights unavailable ({e}); using a fixed random extractor")
        if features is None:
            # fixed seed so the random extractor is the same in every process
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(0)
                features = make_layers(cfgs["E"], batch_norm=False)
        self.layer = layer
        self.pretrained = pretrained
        self.features = features[: VGG19_LAYERS[layer] + 1]
        for p in self.features.parameters():
            p.requires_grad_(False)
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)
        self.eval()

    def train(self, mode: bool = True):
        # the extractor never leaves evaluation mode
        return super().train(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features((x - self.mean) / self.std)


def _check_pair(x: torch.Tensor, x_hat: torch.Tensor) -> None:
    if x.shape != x_hat.shape:
        raise ShapeError(f"loss inputs differ in shape: {tuple(x.shape)} vs {tuple(x_hat.shape)}")


def _expand_mask(mask: Optional[torch.Tensor], like: torch.Tensor) -> torch.Tensor:
    if mask is None:
        return torch.ones_like(like)
    return mask.to(like.dtype).expand_as(like)


def loss_perceptual(x: torch.Tensor, x_hat: torch.Tensor, extractor: PerceptualExtractor,
                    mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """(1/WHC) sum |phi(X) - phi(X_hat)| over the chosen feature layer."""
    _check_pair(x, x_hat)
    if mask is not None:
        m = _expand_mask(mask, x)
        x, x_hat = x * m, x_hat * m
    return (extractor(x) - extractor(x_hat)).abs().mean()


def loss_terms(x: torch.Tensor, x_hat: torch.Tensor, mask: Optional[torch.Tensor] = None,
               weights: LossWeights = LossWeights(),
               extractor: Optional[PerceptualExtractor] = None) -> Dict[str, torch.Tensor]:
    """Weighted L1, L2 and perceptual terms plus their sum under 'total'."""
    _check_pair(x, x_hat)
    m = _expand_mask(mask, x)
    denom = m.sum().clamp_min(1.0)
    diff = (x - x_hat) * m
    terms = {
        "l1": weights.l1 * diff.abs().sum() / denom,
        "l2": weights.l2 * diff.pow(2).sum() / denom,
    }
    if extractor is not None and weights.perp > 0:
        terms["perp"] = weights.perp * loss_perceptual(x, x_hat, extractor, mask)
    else:
        terms["perp"] = x.new_zeros(())
    terms["total"] = terms["l1"] + terms["l2"] + terms["perp"]
    return terms


def loss_total(x: torch.Tensor, x_hat: torch.Tensor, mask: Optional[torch.Tensor] = None,
               weights: LossWeights = LossWeights(),
               extractor: Optional[PerceptualExtractor] = None) -> torch.Tensor:
    return loss_terms(x, x_hat, mask, weights, extractor)["total"]


def loss_normal(n_hat: torch.Tensor, n_ref: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over masked pixels of ||n_hat - n_ref||^2; lies in [0, 4] for unit normals."""
    _check_pair(n_hat, n_ref)
    m = mask.to(n_hat.dtype)
    count = m.sum()
    if count.item() == 0:
        raise EmptyMaskError("normal loss over an empty mask")
    sq = (n_hat - n_ref).pow(2).sum(dim=1, keepdim=True)
    return (sq * m).sum() / count


def loss_lighting_ce(theta_logits: torch.Tensor, phi_logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of both 5-way heads; target is B x 2 (el_idx, az_idx)."""
    target = target.long()
    return F.cross_entropy(theta_logits, target[:, 0]) + F.cross_entropy(phi_logits, target[:, 1])


class Objective(nn.Module):
    """Bundles the loss weights and the frozen perceptual extractor."""

    def __init__(self, weights: LossWeights = LossWeights(), extractor: Optional[PerceptualExtractor] = None):
        super().__init__()
        self.weights = weights
        self.extractor = extractor

    @classmethod
    def from_config(cls, cfg: PS2Config) -> "Objective":
        weights = LossWeights.from_config(cfg)
        extractor = PerceptualExtractor(cfg.perceptual_layer, cfg.perceptual_pretrained) if weights.perp > 0 else None
        return cls(weights, extractor)

    def image(self, x: torch.Tensor, x_hat: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        return loss_total(x, x_hat, mask, self.weights, self.extractor)
