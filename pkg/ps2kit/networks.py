"""Differentiable modules of the two-image inverse-rendering network.

Every encoder-decoder is an hourglass: stride-2 convolution stages going
down, transposed-convolution stages coming back up, and one skip connection
per resolution fused by concatenation. Channel widths follow the reference
layer listing and are multiplied by ``width_scale``.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import AblationConfig, PS2Config
from .errors import ConfigError, ShapeError
from .geometry import positional_encode_torch, spherical_to_dir_torch
from .lightspace import DEFAULT_LIGHTSPACE, LightSpace


def scaled(channels: int, width_scale: float) -> int:
    return max(4, int(round(channels * width_scale)))


def conv_block(cin: int, cout: int, kernel: int, stride: int, padding: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride, padding),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def up_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.ConvTranspose2d(cin, cout, 4, 2, 1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def to_unit_range(x: torch.Tensor) -> torch.Tensor:
    """Map a tanh output from (-1, 1) to (0, 1)."""
    return (x + 1.0) * 0.5


class HourglassEncoder(nn.Module):
    """Stride-2 stages; returns the feature map of every stage (finest first)."""

    def __init__(self, cin: int, channels: Sequence[int]):
        super().__init__()
        if len(channels) < 2:
            raise ValueError("an hourglass needs at least two stages")
        self.channels = list(channels)
        stages = [conv_block(cin, channels[0], 6, 2, 2)]
        for prev, cur in zip(channels[:-1], channels[1:]):
            stages.append(conv_block(prev, cur, 4, 2, 1))
        self.stages = nn.ModuleList(stages)

    @property
    def factor(self) -> int:
        return 2 ** len(self.stages)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        h, w = x.shape[-2:]
        if h % self.factor or w % self.factor:
            raise ShapeError(f"spatial size {h}x{w} is not divisible by {self.factor}")
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class HourglassDecoder(nn.Module):
    def __init__(self, channels: Sequence[int], head_width: int, cout: int):
        super().__init__()
        c = list(channels)
        ups = [up_block(c[-1], c[-2])]
        for j in range(len(c) - 3, -1, -1):
            ups.append(up_block(2 * c[j + 1], c[j]))
        ups.append(up_block(2 * c[0], head_width))
        self.ups = nn.ModuleList(ups)
        self.head = nn.Conv2d(head_width, cout, 5, 1, 2)
        self.channels = c

    def forward(self, feats: Sequence[torch.Tensor], bottleneck: Optional[torch.Tensor] = None) -> torch.Tensor:
        if len(feats) != len(self.channels):
            raise ShapeError(f"decoder expects {len(self.channels)} skip features, got {len(feats)}")
        n = len(feats)
        # rectified after fusion; a purely additive per-sample offset would be
        # cancelled by the next batch norm
        x = feats[-1] if bottleneck is None else torch.relu(feats[-1] + bottleneck)
        x = self.ups[0](x)
        for up, j in zip(self.ups[1:-1], range(n - 2, 0, -1)):
            x = up(torch.cat([x, feats[j]], dim=1))
        x = self.ups[-1](torch.cat([x, feats[0]], dim=1))
        return torch.tanh(self.head(x))


class Hourglass(nn.Module):
    def __init__(self, cin: int, channels: Sequence[int], head_width: int, cout: int):
        super().__init__()
        self.encoder = HourglassEncoder(cin, channels)
        self.decoder = HourglassDecoder(channels, head_width, cout)

    def forward(self, x: torch.Tensor, bottleneck: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.decoder(self.encoder(x), bottleneck)


@dataclass
class LightingLogits:
    theta: torch.Tensor  # B x n, elevation head
    phi: torch.Tensor  # B x n, azimuth head

    def argmax_bins(self) -> torch.Tensor:
        """B x 2 tensor of (el_idx, az_idx)."""
        return torch.stack([self.theta.argmax(dim=1), self.phi.argmax(dim=1)], dim=1)


class IlluminationModule(nn.Module):
    """Classifies the light of one image into elevation and azimuth bins."""

    def __init__(self, cin: int = 9, width_scale: float = 1.0, bins_per_axis: int = 5, dropout: float = 0.25):
        super().__init__()
        c1, c2, c3 = (scaled(c, width_scale) for c in (64, 128, 256))
        self.features = nn.Sequential(
            conv_block(cin, c1, 3, 1, 0),
            conv_block(c1, c2, 3, 1, 0),
            conv_block(c2, c3, 3, 1, 0),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self.theta_head = self._head(c3, width_scale, bins_per_axis, dropout)
        self.phi_head = self._head(c3, width_scale, bins_per_axis, dropout)

    @staticmethod
    def _head(cin: int, width_scale: float, n: int, dropout: float) -> nn.Sequential:
        h1, h2 = scaled(256, width_scale), scaled(64, width_scale)
        return nn.Sequential(
            nn.Linear(cin, h1), nn.ReLU(inplace=True), nn.Dropout(dropout),
            nn.Linear(h1, h2), nn.ReLU(inplace=True), nn.Dropout(dropout),
            nn.Linear(h2, n),
        )

    def forward(self, x: torch.Tensor) -> LightingLogits:
        f = self.features(x)
        return LightingLogits(theta=self.theta_head(f), phi=self.phi_head(f))


class LightingFeature(nn.Module):
    """Maps a light direction to a bottleneck-shaped feature map (8x8 before resizing).

    No normalization layers: the upsampled map is constant per sample, so
    batch statistics over a batch sharing one light would erase it.
    """

    def __init__(self, cout: int, width_scale: float = 1.0):
        super().__init__()
        c64, c128 = scaled(64, width_scale), scaled(128, width_scale)
        self.net = nn.Sequential(
            nn.Conv2d(3, c64, 1, 1, 0), nn.ReLU(inplace=True),
            nn.Conv2d(c64, c128, 1, 1, 0), nn.ReLU(inplace=True), nn.Upsample(scale_factor=2),
            nn.Conv2d(c128, c128, 3, 1, 1), nn.ReLU(inplace=True), nn.Upsample(scale_factor=2),
            nn.Conv2d(c128, cout, 3, 1, 1), nn.ReLU(inplace=True), nn.Upsample(scale_factor=2),
            nn.Conv2d(cout, cout, 3, 1, 1),
        )

    def forward(self, light: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
        f = self.net(light.reshape(-1, 3, 1, 1))
        if tuple(f.shape[-2:]) != tuple(size):
            f = F.interpolate(f, size=size, mode="bilinear", align_corners=False)
        return f


@dataclass
class SceneEstimate:
    normal: torch.Tensor
    albedo: Tuple[torch.Tensor, torch.Tensor]
    albedo_refined: Tuple[torch.Tensor, torch.Tensor]
    reflectance: Tuple[torch.Tensor, torch.Tensor]
    reconstruction: Tuple[torch.Tensor, torch.Tensor]
    logits: Optional[Tuple[LightingLogits, LightingLogits]] = None
    lights: Optional[Tuple[torch.Tensor, torch.Tensor]] = None
    relit: Optional[torch.Tensor] = None


def broadcast_light(light: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """B x 3 light -> B x 3 x H x W constant map."""
    return light[:, :, None, None].expand(-1, -1, *like.shape[-2:])


def compose_reconstruction(reflectance: torch.Tensor, normal: torch.Tensor, light: torch.Tensor) -> torch.Tensor:
    """R * max(l^T N, 0); the analytic shading stays outside the learned module."""
    shading = torch.clamp((normal * light[:, :, None, None]).sum(dim=1, keepdim=True), min=0.0)
    return reflectance * shading


class PS2Net(nn.Module):
    """Encoder, normal/albedo decoders, illumination, albedo refinement,
    reconstruction and relighting modules wired for an image pair."""

    ENCODER_CHANNELS = (32, 64, 128, 256, 512)
    REFINE_CHANNELS = (128, 128, 256)
    RENDER_CHANNELS = (64, 128, 128, 256)

    def __init__(self, ablation: Optional[AblationConfig] = None, width_scale: float = 1.0,
                 pe_freqs: int = 3, use_mask_channel: bool = True,
                 lightspace: LightSpace = DEFAULT_LIGHTSPACE, freeze_illumination: bool = False):
        super().__init__()
        self.ablation = (ablation or AblationConfig()).validate()
        self.width_scale = width_scale
        self.pe_freqs = pe_freqs
        self.use_mask_channel = use_mask_channel
        self.lightspace = lightspace
        self.freeze_illumination = freeze_illumination
        s = width_scale
        mask_ch = 1 if use_mask_channel else 0

        enc = [scaled(c, s) for c in self.ENCODER_CHANNELS]
        self.encoder = HourglassEncoder(7, enc)
        self.normal_decoder = HourglassDecoder(enc, scaled(64, s), 3)
        self.albedo_decoder = HourglassDecoder(enc, scaled(64, s), 6)
        self.illumination = IlluminationModule(9, s, lightspace.bins_per_axis)

        self.refine_in_channels = 9 + self.lighting_feature_channels
        self.refinement = Hourglass(self.refine_in_channels, [scaled(c, s) for c in self.REFINE_CHANNELS], scaled(64, s), 3)

        render = [scaled(c, s) for c in self.RENDER_CHANNELS]
        self.reconstruction = Hourglass(12 + mask_ch, render, scaled(64, s), 3)
        self.relighting = Hourglass(3 + mask_ch, render, scaled(64, s), 3)
        self.lighting_feature = LightingFeature(render[-1], s)

        el, az = lightspace.center_tables()
        self.register_buffer("elevation_centers", el, persistent=False)
        self.register_buffer("azimuth_centers", az, persistent=False)
        self.register_buffer("view_dir", torch.tensor([0.0, 0.0, 1.0]), persistent=False)

    @classmethod
    def from_config(cls, cfg: PS2Config) -> "PS2Net":
        return cls(cfg.ablation, cfg.width_scale, cfg.pe_freqs, cfg.use_mask_channel,
                   LightSpace(cfg.bins_per_axis), cfg.freeze_illumination)

    @property
    def lighting_feature_channels(self) -> int:
        """Channels of L_i: p_i alone (2) or p_i plus its encoding."""
        return 2 * (1 + 2 * self.pe_freqs) if self.ablation.pe else 2

    # individual modules

    def encode(self, image1: torch.Tensor, image2: torch.Tensor, mask: torch.Tensor) -> List[torch.Tensor]:
        return self.encoder(torch.cat([image1, image2, mask], dim=1))

    def decode_normal(self, feats: Sequence[torch.Tensor], mask: torch.Tensor) -> torch.Tensor:
        n = self.normal_decoder(feats)
        return F.normalize(n, dim=1, eps=1e-8) * mask

    def decode_albedo(self, feats: Sequence[torch.Tensor], mask: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        a = to_unit_range(self.albedo_decoder(feats)) * mask
        return a[:, :3], a[:, 3:]

    def estimate_lighting(self, normal: torch.Tensor, albedo: torch.Tensor, image: torch.Tensor) -> LightingLogits:
        return self.illumination(torch.cat([normal, albedo, image], dim=1))

    def light_from_logits(self, logits: LightingLogits) -> torch.Tensor:
        """Unit direction of the argmax bin center.

        The forward value is the hard bin center; gradients flow through the
        softmax-weighted center angles (straight-through).
        """
        el_soft = F.softmax(logits.theta, dim=1) @ self.elevation_centers
        az_soft = F.softmax(logits.phi, dim=1) @ self.azimuth_centers
        el_hard = self.elevation_centers[logits.theta.argmax(dim=1)]
        az_hard = self.azimuth_centers[logits.phi.argmax(dim=1)]
        el = el_hard + el_soft - el_soft.detach()
        az = az_hard + az_soft - az_soft.detach()
        light = spherical_to_dir_torch(el, az)
        return light.detach() if self.freeze_illumination else light

    def lighting_features(self, normal: torch.Tensor, light: torch.Tensor) -> torch.Tensor:
        """Per-pixel p_i = [n^T h_i, v^T h_i], positionally encoded when PE is on."""
        h = F.normalize(light + self.view_dir, dim=1)
        ndoth = (normal * h[:, :, None, None]).sum(dim=1, keepdim=True)
        vdoth = (h[:, 2])[:, None, None, None].expand_as(ndoth)
        p = torch.cat([ndoth, vdoth], dim=1)
        if self.ablation.pe:
            return positional_encode_torch(p, self.pe_freqs, dim=1)
        return p

    def refine_albedo(self, image: torch.Tensor, normal: torch.Tensor, albedo: torch.Tensor,
                      lighting_features: Optional[torch.Tensor], mask: torch.Tensor) -> torch.Tensor:
        if lighting_features is None:
            raise ConfigError("albedo refinement needs a lighting estimate; disable AR when LE is off")
        x = torch.cat([image, normal, albedo, lighting_features], dim=1)
        return to_unit_range(self.refinement(x)) * mask

    def _with_mask(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return torch.cat([x, mask], dim=1) if self.use_mask_channel else x

    def relight(self, source: torch.Tensor, target_light: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = self._with_mask(source, mask)
        feats = self.relighting.encoder(x)
        bottleneck = self.lighting_feature(target_light, tuple(feats[-1].shape[-2:]))
        return to_unit_range(self.relighting.decoder(feats, bottleneck)) * mask

    def reflectance(self, image: torch.Tensor, normal: torch.Tensor, albedo: torch.Tensor,
                    light: Optional[torch.Tensor], mask: torch.Tensor) -> torch.Tensor:
        light_map = broadcast_light(light, image) if light is not None else torch.zeros_like(image)
        x = self._with_mask(torch.cat([image, normal, albedo, light_map], dim=1), mask)
        return to_unit_range(self.reconstruction(x)) * mask

    def reconstruct(self, image: torch.Tensor, normal: torch.Tensor, albedo: torch.Tensor,
                    light: Optional[torch.Tensor], mask: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Returns (reconstructed image, reflectance R). Without a light the
        reflectance is used as the image directly."""
        r = self.reflectance(image, normal, albedo, light, mask)
        if light is None:
            return r, r
        return compose_reconstruction(r, normal, light), r

    # full pass

    def bin_center_lights(self, bins: torch.Tensor) -> torch.Tensor:
        """B x 2 (el_idx, az_idx) -> B x 3 bin-center directions."""
        return spherical_to_dir_torch(self.elevation_centers[bins[:, 0]], self.azimuth_centers[bins[:, 1]])

    def forward(self, image1: torch.Tensor, image2: torch.Tensor, mask: torch.Tensor,
                lights: Optional[Tuple[torch.Tensor, torch.Tensor]] = None) -> SceneEstimate:
        """Full pass over a pair.

        In calibrated mode `lights` (two B x 3 directions) replace the
        estimated ones for refinement, reconstruction and relighting; the
        illumination logits are still reported when LE is on.
        """
        ab = self.ablation
        if ab.calibrated and lights is None:
            raise ConfigError("calibrated mode needs the capture lights for every pair")
        feats = self.encode(image1, image2, mask)
        normal = self.decode_normal(feats, mask)
        albedo = self.decode_albedo(feats, mask)
        images = (image1, image2)

        logits = None
        if ab.le:
            logits = tuple(self.estimate_lighting(normal, a, im) for a, im in zip(albedo, images))
        if ab.calibrated:
            lights = tuple(F.normalize(l.to(image1.dtype), dim=1) for l in lights)
        elif logits is not None:
            lights = tuple(self.light_from_logits(lg) for lg in logits)
        else:
            lights = None

        if ab.ar:
            refined = tuple(
                self.refine_albedo(im, normal, a, self.lighting_features(normal, l), mask)
                for im, a, l in zip(images, albedo, lights)
            )
        else:
            refined = albedo

        recon, refl = [], []
        for i in range(2):
            out, r = self.reconstruct(images[i], normal, refined[i], lights[i] if lights else None, mask)
            recon.append(out)
            refl.append(r)

        relit = self.relight(image2, lights[0], mask) if ab.ir else None
        return SceneEstimate(normal=normal, albedo=albedo, albedo_refined=refined,
                             reflectance=tuple(refl), reconstruction=tuple(recon),
                             logits=logits, lights=lights, relit=relit)

    def module_groups(self) -> dict:
        """Named parameter groups, used for gradient bookkeeping."""
        return {
            "encoder": self.encoder,
            "normal_decoder": self.normal_decoder,
            "albedo_decoder": self.albedo_decoder,
            "illumination": self.illumination,
            "refinement": self.refinement,
            "reconstruction": self.reconstruction,
            "relighting": nn.ModuleList([self.relighting, self.lighting_feature]),
        }
