"""Decoder (3D-aware generator), encoder and discriminator networks.

All networks take images in the torch layout ``(N, 3, H, W)`` with values in
``[-1, 1]`` and poses as ``(N, 3)`` rows of (azimuth deg, elevation deg,
scale).
"""
from __future__ import annotations

from typing import Protocol, runtime_checkable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .exceptions import ConfigError
from .geometry import PoseRange, project_volume, rigid_transform_volume, unit_to_pose_tensor


@runtime_checkable
class GeneratorInterface(Protocol):
    """Anything that renders ``(z, pose) -> image`` can stand in for the decoder."""

    latent_dim: int
    resolution: int
    pose_range: PoseRange

    def __call__(self, z: torch.Tensor, poses: torch.Tensor) -> torch.Tensor: ...


def sample_latent(generator: torch.Generator, n: int, length: int, dtype=torch.float32) -> torch.Tensor:
    """i.i.d. uniform [0, 1] latent codes of shape ``(n, length)``."""
    if length <= 0:
        raise ValueError("latent length must be positive")
    return torch.rand(n, length, generator=generator, dtype=dtype)


class AdaptiveNorm(nn.Module):
    """Instance normalisation with a per-channel affine predicted from the style vector."""

    def __init__(self, channels, style_dim):
        super().__init__()
        self.affine = nn.Linear(style_dim, 2 * channels)
        nn.init.zeros_(self.affine.bias)

    def forward(self, x, style):
        dims = tuple(range(2, x.dim()))
        mean = x.mean(dim=dims, keepdim=True)
        var = x.var(dim=dims, keepdim=True, unbiased=False)
        x = (x - mean) / torch.sqrt(var + 1e-5)
        gamma, beta = self.affine(style).chunk(2, dim=1)
        shape = (x.shape[0], -1) + (1,) * len(dims)
        return x * (1.0 + gamma.reshape(shape)) + beta.reshape(shape)


class Decoder(nn.Module):
    """HoloGAN-style generator.

    A learned constant volume is modulated by ``z``, upsampled by 3D blocks,
    rigidly transformed by the pose, projected to 2D and upsampled by
    conv-then-bilinear blocks to the output resolution.
    """

    def __init__(self, cfg: ModelConfig, pose_range: PoseRange):
        super().__init__()
        self.cfg = cfg
        self.latent_dim = cfg.latent_dim
        self.resolution = cfg.resolution
        self.pose_range = pose_range
        canon = pose_range.canonical
        self.canonical = (canon.azimuth_deg, canon.elevation_deg)
        hidden = cfg.mapping_hidden

        self.mapping = nn.Sequential(
            nn.Linear(cfg.latent_dim, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden), nn.LeakyReLU(0.2),
        )
        s = cfg.const_size
        self.const = nn.Parameter(torch.randn(1, cfg.const_channels, s, s, s))
        self.const_norm = AdaptiveNorm(cfg.const_channels, hidden)

        self.convs3d = nn.ModuleList()
        self.norms3d = nn.ModuleList()
        ch = cfg.const_channels
        for i in range(cfg.n_3d_up):
            # width halves with each doubling of the grid to keep the 3D cost in check
            out = max(cfg.volume_channels >> i, cfg.rotated_channels)
            self.convs3d.append(nn.Conv3d(ch, out, 3, padding=1))
            self.norms3d.append(AdaptiveNorm(out, hidden))
            ch = out

        self.post_rotation = nn.Conv3d(ch, cfg.rotated_channels, 3, padding=1)
        depth = cfg.volume_size
        self.projection = nn.Conv2d(depth * cfg.rotated_channels, cfg.projection_channels, 1)

        self.convs2d = nn.ModuleList()
        self.norms2d = nn.ModuleList()
        ch = cfg.projection_channels
        for i in range(cfg.n_2d_up):
            out = max(cfg.channels_2d >> i, 16)
            self.convs2d.append(nn.Conv2d(ch, out, 3, padding=1))
            self.norms2d.append(AdaptiveNorm(out, hidden))
            ch = out
        self.to_rgb = nn.Conv2d(ch, 3, 3, padding=1)

    def volume(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Canonical (unrotated) feature volume and the style vector for ``z``."""
        if z.dim() != 2 or z.shape[1] != self.latent_dim:
            raise ConfigError(f"latent code must have shape (N, {self.latent_dim}), got {tuple(z.shape)}")
        style = self.mapping(z)
        x = self.const.expand(z.shape[0], -1, -1, -1, -1)
        x = F.leaky_relu(self.const_norm(x, style), 0.2)
        for conv, norm in zip(self.convs3d, self.norms3d):
            x = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
            x = F.leaky_relu(norm(conv(x), style), 0.2)
        return x, style

    def forward(self, z: torch.Tensor, poses: torch.Tensor) -> torch.Tensor:
        x, style = self.volume(z)
        x = rigid_transform_volume(x, poses, canonical=self.canonical)
        x = F.leaky_relu(self.post_rotation(x), 0.2)
        x = F.leaky_relu(self.projection(project_volume(x)), 0.2)
        for conv, norm in zip(self.convs2d, self.norms2d):
            x = F.leaky_relu(norm(conv(x), style), 0.2)
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return torch.tanh(self.to_rgb(x))


class ResidualDown(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=2)
        self.conv2 = nn.Conv2d(cout, cout, 3)
        self.skip = nn.Conv2d(cin, cout, 1)

    def forward(self, x):
        h = F.leaky_relu(self.conv1(F.pad(x, (1, 1, 1, 1), mode="reflect")), 0.2)
        h = self.conv2(F.pad(h, (1, 1, 1, 1), mode="reflect"))
        return F.leaky_relu(h + self.skip(F.avg_pool2d(x, 2)), 0.2)


class Encoder(nn.Module):
    """Three stride-2 residual blocks followed by a pose head and a z head."""

    def __init__(self, cfg: ModelConfig, pose_range: PoseRange):
        super().__init__()
        self.cfg = cfg
        self.pose_range = pose_range
        self.resolution = cfg.resolution
        c = cfg.encoder_channels
        self.stem = nn.Conv2d(3, c, 3)
        self.blocks = nn.Sequential(ResidualDown(c, 2 * c), ResidualDown(2 * c, 4 * c),
                                    ResidualDown(4 * c, 4 * c))
        self.pose_conv = nn.Conv2d(4 * c, 4 * c, 3)
        self.pose_fc = nn.Linear(4 * c, 3)
        self.z_conv = nn.Conv2d(4 * c, 4 * c, 3)
        self.z_fc = nn.Linear(4 * c, cfg.latent_dim)

    def _check(self, img):
        if img.dim() != 4 or img.shape[1] != 3 or img.shape[2:] != (self.resolution, self.resolution):
            raise ValueError(
                f"expected images of shape (N, 3, {self.resolution}, {self.resolution}), got {tuple(img.shape)}")

    def features(self, img):
        self._check(img)
        h = F.leaky_relu(self.stem(F.pad(img, (1, 1, 1, 1), mode="reflect")), 0.2)
        return self.blocks(h)

    def _head(self, conv, fc, h):
        h = F.leaky_relu(conv(F.pad(h, (1, 1, 1, 1), mode="reflect")), 0.2)
        return fc(h.mean(dim=(2, 3)))

    def pose_unit(self, h):
        return torch.sigmoid(self._head(self.pose_conv, self.pose_fc, h))

    def latent(self, h):
        return torch.tanh(self._head(self.z_conv, self.z_fc, h))

    def forward(self, img):
        """Return ``(z, poses)``; poses are already remapped into the pose range."""
        h = self.features(img)
        return self.latent(h), unit_to_pose_tensor(self.pose_unit(h), self.pose_range)


class Discriminator(nn.Module):
    """Strided-convolution classifier, one stride-2 block per decoder upsampling block."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.resolution = cfg.resolution
        c = cfg.disc_channels
        layers = [nn.Conv2d(3, c, 3, padding=1), nn.LeakyReLU(0.2)]
        for _ in range(cfg.n_2d_up):
            layers += [nn.Conv2d(c, 2 * c, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c *= 2
        self.body = nn.Sequential(*layers)
        side = cfg.resolution >> cfg.n_2d_up
        self.fc = nn.Linear(c * side * side, 1)

    def forward(self, img):
        if img.dim() != 4 or img.shape[1] != 3 or img.shape[2:] != (self.resolution, self.resolution):
            raise ValueError(
                f"expected images of shape (N, 3, {self.resolution}, {self.resolution}), got {tuple(img.shape)}")
        return self.fc(self.body(img).flatten(1)).squeeze(1)


def build_networks(cfg: ModelConfig, pose_range: PoseRange, seed: int = 0):
    """Seeded construction of ``(decoder, encoder, discriminator)``."""
    _ = cfg.n_2d_up  # raises on a bad resolution
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return Decoder(cfg, pose_range), Encoder(cfg, pose_range), Discriminator(cfg)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module
