"""Parametric networks: content/style encoders, AdaIN decoder, residual
generator, the two discriminators and the frozen statistics extractor."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

EPS = 1e-5


class UnknownDomainError(ValueError):
    pass


@dataclass
class NetworkConfig:
    anchors: tuple[str, ...] = ("id", "m")
    base_width: int = 32
    n_downsample: int = 2
    n_res: int = 2
    style_dim: int = 8
    mlp_dim: int = 128
    style_downsample: int = 4
    disc_width: int = 32
    patch_size: int = 16
    phi_kind: str = "random"
    phi_widths: tuple[int, ...] = (16, 32, 64, 64)
    phi_seed: int = 1234
    phi_weights: str | None = None
    init_seed: int = 0

    def __post_init__(self):
        self.anchors = tuple(self.anchors)
        if self.phi_kind == "vgg":
            self.phi_widths = VGGFeatures.widths
        self.phi_widths = tuple(self.phi_widths)
        if not self.anchors or self.anchors[0] != "id":
            raise ValueError("anchor set must start with 'id'")
        if len(set(self.anchors)) != len(self.anchors):
            raise ValueError(f"duplicate anchor labels: {self.anchors}")

    @property
    def content_channels(self) -> int:
        return self.base_width * 2**self.n_downsample

    @property
    def conditioning_dim(self) -> int:
        return 2 * sum(self.phi_widths)


def check_image_shape(images: torch.Tensor, multiple: int = 1) -> None:
    if images.dim() != 4 or images.shape[1] != 3:
        raise ValueError(f"expected an (N, 3, H, W) batch, got {tuple(images.shape)}")
    h, w = images.shape[-2:]
    if h % multiple or w % multiple:
        raise ValueError(f"image size {h}x{w} is not divisible by {multiple}")


# --------------------------------------------------------------------------
# AdaIN


def channel_moments(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample, per-channel spatial mean and (population) std."""
    flat = x.flatten(2)
    return flat.mean(-1), flat.std(-1, unbiased=False)


def standardize(x: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    mean, std = channel_moments(x)
    return (x - mean[..., None, None]) / (std[..., None, None] + eps)


def adain(features: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor,
          eps: float = EPS) -> torch.Tensor:
    """Re-normalise each channel of ``features`` to mean ``mu`` and std ``sigma``.

    ``mu``/``sigma`` are either per-channel vectors of shape (C,) shared by the
    batch, or per-sample (N, C).
    """
    c = features.shape[1]
    if mu.shape[-1] != c or sigma.shape[-1] != c:
        raise ValueError(
            f"channel mismatch: features have {c}, stats have {mu.shape[-1]}/{sigma.shape[-1]}")
    if (sigma < 0).any():
        raise ValueError("target sigma must be non-negative")
    if mu.dim() == 1:
        mu, sigma = mu.expand(features.shape[0], c), sigma.expand(features.shape[0], c)
    return sigma[..., None, None] * standardize(features, eps) + mu[..., None, None]


class AdaINResBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, dim, 3, 1, 1, padding_mode="reflect")
        self.conv2 = nn.Conv2d(dim, dim, 3, 1, 1, padding_mode="reflect")

    def forward(self, x, params):
        g1, b1, g2, b2 = params.chunk(4, dim=1)
        out = self.conv1(x)
        out = F.relu(standardize(out) * (1 + g1[..., None, None]) + b1[..., None, None])
        out = self.conv2(out)
        out = standardize(out) * (1 + g2[..., None, None]) + b2[..., None, None]
        return x + out


class ResBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(dim, dim, 3, 1, 1, padding_mode="reflect"),
            nn.InstanceNorm2d(dim),
            nn.ReLU(inplace=True),
            nn.Conv2d(dim, dim, 3, 1, 1, padding_mode="reflect"),
            nn.InstanceNorm2d(dim),
        )

    def forward(self, x):
        return x + self.body(x)


def mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, hidden), nn.ReLU(inplace=True),
        nn.Linear(hidden, hidden), nn.ReLU(inplace=True),
        nn.Linear(hidden, out_dim),
    )


# --------------------------------------------------------------------------
# Generator side


class ContentEncoder(nn.Module):
    def __init__(self, width: int = 32, n_downsample: int = 2, n_res: int = 2):
        super().__init__()
        self.n_downsample = n_downsample
        layers = [nn.Conv2d(3, width, 7, 1, 3, padding_mode="reflect"),
                  nn.InstanceNorm2d(width), nn.ReLU(inplace=True)]
        for _ in range(n_downsample):
            layers += [nn.Conv2d(width, 2 * width, 4, 2, 1, padding_mode="reflect"),
                       nn.InstanceNorm2d(2 * width), nn.ReLU(inplace=True)]
            width *= 2
        layers += [ResBlock(width) for _ in range(n_res)]
        self.model = nn.Sequential(*layers)
        self.out_channels = width

    def forward(self, images):
        check_image_shape(images, 2**self.n_downsample)
        return self.model(images)


class StyleEncoder(nn.Module):
    """Shared convolutional trunk with one linear head per anchor domain."""

    def __init__(self, domains: Sequence[str], width: int = 32, n_downsample: int = 4,
                 style_dim: int = 8):
        super().__init__()
        layers = [nn.Conv2d(3, width, 7, 1, 3, padding_mode="reflect"), nn.ReLU(inplace=True)]
        w = width
        for _ in range(n_downsample):
            w_next = min(2 * w, 4 * width)
            layers += [nn.Conv2d(w, w_next, 4, 2, 1), nn.ReLU(inplace=True)]
            w = w_next
        layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
        self.trunk = nn.Sequential(*layers)
        self.heads = nn.ModuleDict({d: nn.Linear(w, style_dim) for d in domains})
        self.style_dim = style_dim

    def forward(self, images, domain: str):
        if domain not in self.heads:
            raise UnknownDomainError(f"unknown domain {domain!r}; known: {list(self.heads)}")
        check_image_shape(images)
        if images.shape[0] == 0:
            return images.new_zeros(0, self.style_dim)
        return self.heads[domain](self.trunk(images))


class _ConditionedDecoder(nn.Module):
    """Residual AdaIN blocks, then nearest-upsample + conv stages, then tanh.

    The conditioning vector reaches the convolutions only through ``self.mlp``.
    """

    def __init__(self, in_channels: int, width: int, cond_dim: int, mlp_dim: int,
                 n_upsample: int, n_res: int):
        super().__init__()
        self.entry = nn.Identity() if in_channels == width else nn.Conv2d(in_channels, width, 1)
        self.blocks = nn.ModuleList([AdaINResBlock(width) for _ in range(n_res)])
        ups = []
        for _ in range(n_upsample):
            ups += [nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(width, width // 2, 5, 1, 2, padding_mode="reflect"),
                    nn.GroupNorm(1, width // 2), nn.ReLU(inplace=True)]
            width //= 2
        self.upsample = nn.Sequential(*ups)
        self.out = nn.Conv2d(width, 3, 7, 1, 3, padding_mode="reflect")
        self.block_width = self.blocks[0].conv1.in_channels if n_res else 0
        self.mlp = mlp(cond_dim, mlp_dim, n_res * 4 * self.block_width)
        self.cond_dim = cond_dim

    def forward(self, content, cond):
        if content.shape[0] != cond.shape[0]:
            raise ValueError(
                f"batch mismatch: content has {content.shape[0]} rows, conditioning {cond.shape[0]}")
        if cond.shape[-1] != self.cond_dim:
            raise ValueError(f"conditioning length {cond.shape[-1]} != {self.cond_dim}")
        x = self.entry(content)
        if content.shape[0] == 0:
            scale = 2 ** (len(self.upsample) // 4)
            return content.new_zeros(0, 3, content.shape[2] * scale, content.shape[3] * scale)
        params = self.mlp(cond).chunk(len(self.blocks), dim=1) if self.blocks else []
        for block, p in zip(self.blocks, params):
            x = block(x, p)
        return torch.tanh(self.out(self.upsample(x)))


class Decoder(_ConditionedDecoder):
    def __init__(self, content_channels: int, style_dim: int = 8, mlp_dim: int = 128,
                 n_upsample: int = 2, n_res: int = 2):
        super().__init__(content_channels, content_channels, style_dim, mlp_dim,
                         n_upsample, n_res)


class ResidualGenerator(_ConditionedDecoder):
    """Decoder mirror at half width whose last conv starts at zero, so the
    initial residual is exactly zero."""

    def __init__(self, content_channels: int, cond_dim: int, mlp_dim: int = 128,
                 n_upsample: int = 2, n_res: int = 2):
        super().__init__(content_channels, content_channels // 2, cond_dim, mlp_dim,
                         n_upsample, n_res)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)


# --------------------------------------------------------------------------
# Discriminators


class MultiTargetDiscriminator(nn.Module):
    """Patch discriminator with a shared trunk and one output branch per domain."""

    def __init__(self, domains: Sequence[str], width: int = 32):
        super().__init__()
        self.trunk = nn.Sequential(
            nn.Conv2d(3, width, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(width, 2 * width, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * width, 4 * width, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(4 * width, 4 * width, 3, 1, 1), nn.LeakyReLU(0.2, inplace=True),
        )
        self.heads = nn.ModuleDict({d: nn.Conv2d(4 * width, 1, 3, 1, 1) for d in domains})

    def forward(self, images, domain: str):
        if domain not in self.heads:
            raise UnknownDomainError(f"unknown domain {domain!r}; known: {list(self.heads)}")
        check_image_shape(images, 8)
        return self.heads[domain](self.trunk(images))


class PatchDiscriminator(nn.Module):
    def __init__(self, patch_size: int = 16, width: int = 32):
        super().__init__()
        if patch_size % 4:
            raise ValueError("patch size must be a multiple of 4")
        self.patch_size = patch_size
        self.model = nn.Sequential(
            nn.Conv2d(3, width, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(width, 2 * width, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * width, 1, 3, 1, 1),
        )

    def forward(self, patches):
        check_image_shape(patches)
        if tuple(patches.shape[-2:]) != (self.patch_size, self.patch_size):
            raise ValueError(
                f"expected {self.patch_size}x{self.patch_size} patches, got {tuple(patches.shape[-2:])}")
        return self.model(patches).mean(dim=(1, 2, 3))


# --------------------------------------------------------------------------
# Frozen feature extractor


class RandomPyramid(nn.Module):
    """Fixed random conv pyramid; stage k is (avgpool) + conv + ReLU.

    ``identity=True`` with ``kernel_size=1`` and ``activation=False`` gives an
    exactly linear pass-through, handy for hand-computed checks.
    """

    def __init__(self, widths: Sequence[int] = (16, 32, 64, 64), seed: int = 1234,
                 kernel_size: int = 3, activation: bool = True, identity: bool = False):
        super().__init__()
        self.widths = tuple(widths)
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        stages = []
        c_in = 3
        for k, c_out in enumerate(self.widths):
            conv = nn.Conv2d(c_in, c_out, kernel_size, 1, kernel_size // 2,
                             padding_mode="replicate")
            with torch.no_grad():
                if identity:
                    if c_in != c_out or kernel_size % 2 == 0:
                        raise ValueError("identity stages need equal widths and an odd kernel")
                    conv.weight.zero_()
                    centre = kernel_size // 2
                    for c in range(c_out):
                        conv.weight[c, c, centre, centre] = 1.0
                else:
                    fan_in = c_in * kernel_size * kernel_size
                    conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                      * math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
            layers = [nn.AvgPool2d(2, ceil_mode=True)] if k > 0 else []
            layers.append(conv)
            if activation:
                layers.append(nn.ReLU())
            stages.append(nn.Sequential(*layers))
            c_in = c_out
        self.stages = nn.ModuleList(stages)
        self.requires_grad_(False)

    def forward(self, images):
        feats = []
        x = images
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class VGGFeatures(nn.Module):
    """VGG-19 relu1_1..relu4_1 taps, loaded from a local state-dict file."""

    taps = (1, 6, 11, 20)
    widths = (64, 128, 256, 512)

    def __init__(self, weights_path: str):
        super().__init__()
        from torchvision.models import vgg19

        features = vgg19(weights=None).features[: self.taps[-1] + 1]
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        state = {k.removeprefix("features."): v for k, v in state.items()
                 if not k.startswith("classifier")}
        features.load_state_dict({k: v for k, v in state.items()
                                  if int(k.split(".")[0]) <= self.taps[-1]})
        self.features = features
        self.seed = None
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.requires_grad_(False)

    def forward(self, images):
        x = ((images + 1) / 2 - self.mean) / self.std
        feats = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.taps:
                feats.append(x)
        return feats


def build_extractor(cfg: NetworkConfig) -> nn.Module:
    if cfg.phi_kind == "random":
        return RandomPyramid(cfg.phi_widths, cfg.phi_seed)
    if cfg.phi_kind == "vgg":
        if not cfg.phi_weights:
            raise ValueError("phi_kind='vgg' needs phi_weights pointing to a local file")
        return VGGFeatures(cfg.phi_weights)
    raise ValueError(f"unknown extractor kind {cfg.phi_kind!r}")


@dataclass
class FeatureStatistics:
    """Per-stage channel means and stds, shape (C_k,) when batch-averaged or
    (N, C_k) per image."""

    mu: list[torch.Tensor] = field(default_factory=list)
    sigma: list[torch.Tensor] = field(default_factory=list)

    def __len__(self):
        return len(self.mu)

    def vector(self) -> torch.Tensor:
        """Concatenate (mu_1, sigma_1, ..., mu_K, sigma_K) along the last axis."""
        parts = []
        for m, s in zip(self.mu, self.sigma):
            parts += [m, s]
        return torch.cat(parts, dim=-1)


def image_statistics(phi: nn.Module, images: torch.Tensor, eps: float = EPS) -> FeatureStatistics:
    """Per-image statistics. sigma is sqrt(var + eps) so constant maps stay differentiable."""
    check_image_shape(images)
    stats = FeatureStatistics()
    for f in phi(images):
        flat = f.flatten(2)
        stats.mu.append(flat.mean(-1))
        stats.sigma.append(torch.sqrt(flat.var(-1, unbiased=False) + eps))
    return stats


def extract_statistics(phi: nn.Module, images: torch.Tensor) -> FeatureStatistics:
    per_image = image_statistics(phi, images)
    return FeatureStatistics([m.mean(0) for m in per_image.mu],
                             [s.mean(0) for s in per_image.sigma])


# --------------------------------------------------------------------------
# Bundle


class NetworkBundle(nn.Module):
    def __init__(self, cfg: NetworkConfig | None = None):
        super().__init__()
        cfg = cfg or NetworkConfig()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.init_seed)
            self.content_encoder = ContentEncoder(cfg.base_width, cfg.n_downsample, cfg.n_res)
            cc = self.content_encoder.out_channels
            self.style_encoder = StyleEncoder(cfg.anchors, cfg.base_width,
                                              cfg.style_downsample, cfg.style_dim)
            self.decoder = Decoder(cc, cfg.style_dim, cfg.mlp_dim, cfg.n_downsample, cfg.n_res)
            self.residual_generator = ResidualGenerator(cc, cfg.conditioning_dim, cfg.mlp_dim,
                                                        cfg.n_downsample, cfg.n_res)
            self.disc_mt = MultiTargetDiscriminator(cfg.anchors, cfg.disc_width)
            self.disc_fs = PatchDiscriminator(cfg.patch_size, cfg.disc_width)
        self.phi = build_extractor(cfg)
        if sum(self.phi.widths) * 2 != cfg.conditioning_dim:
            raise ValueError("phi_widths do not match the extractor's stage widths")
        # weights over anchors = softmax(anchor_logits); zero init means uniform
        self.anchor_logits = nn.Parameter(torch.zeros(len(cfg.anchors)))
        # mean style code per anchor, used at inference
        self.register_buffer("style_bank", torch.zeros(len(cfg.anchors), cfg.style_dim))

    @property
    def anchors(self) -> tuple[str, ...]:
        return self.cfg.anchors

    @property
    def downsample_factor(self) -> int:
        return 2**self.cfg.n_downsample

    def generator_parameters(self) -> list[nn.Parameter]:
        return (list(self.content_encoder.parameters()) + list(self.style_encoder.parameters())
                + list(self.decoder.parameters()) + list(self.residual_generator.parameters())
                + [self.anchor_logits])

    def discriminator_parameters(self) -> list[nn.Parameter]:
        return list(self.disc_mt.parameters()) + list(self.disc_fs.parameters())

    # thin named wrappers around the components

    def encode_content(self, images):
        return self.content_encoder(images)

    def encode_style(self, images, domain: str):
        return self.style_encoder(images, domain)

    def decode(self, content, style):
        return self.decoder(content, style)

    def discriminate_multitarget(self, images, domain: str):
        return self.disc_mt(images, domain)

    def discriminate_patches(self, patches):
        return self.disc_fs(patches)

    def image_statistics(self, images) -> FeatureStatistics:
        return image_statistics(self.phi, images)

    def extract_statistics(self, images) -> FeatureStatistics:
        return extract_statistics(self.phi, images)
