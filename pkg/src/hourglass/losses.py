"""Training objectives: consistency, reconstruction, perceptual, SSIM, adversarial."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import PoseRange, pose_tensor_to_unit

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
DYNAMIC_RANGE = 2.0  # images live in [-1, 1]
SSIM_C1 = (0.01 * DYNAMIC_RANGE) ** 2
SSIM_C2 = (0.03 * DYNAMIC_RANGE) ** 2


@dataclass
class LossReport:
    l_z: float = 0.0
    l_theta: float = 0.0
    l_2: float = 0.0
    l_vgg: float = 0.0
    l_ssim: float = 0.0
    l_adv_g: float = 0.0
    l_adv_d: float = 0.0
    l_2_gen: float = 0.0
    l_vgg_gen: float = 0.0
    l_ssim_gen: float = 0.0
    total: float = 0.0

    COMPONENTS = ("l_z", "l_theta", "l_2", "l_vgg", "l_ssim", "l_adv_g",
                  "l_2_gen", "l_vgg_gen", "l_ssim_gen")

    def as_dict(self) -> dict:
        return asdict(self)

    def is_finite(self) -> bool:
        return all(math.isfinite(getattr(self, f.name)) for f in fields(self))


# LossReport field -> LossWeights attribute; the discriminator loss is not part of the total
WEIGHT_KEYS = {"l_z": "z", "l_theta": "theta", "l_2": "l2", "l_vgg": "vgg", "l_ssim": "ssim",
               "l_adv_g": "adv", "l_2_gen": "l2_gen", "l_vgg_gen": "vgg_gen",
               "l_ssim_gen": "ssim_gen"}


def weighted_total(components: dict, weights) -> torch.Tensor | float:
    """Sum of ``weight * component`` over the components present."""
    total = 0.0
    for name, value in components.items():
        if name in WEIGHT_KEYS:
            total = total + getattr(weights, WEIGHT_KEYS[name]) * value
    return total


def make_report(components: dict, weights, l_adv_d: float = 0.0) -> LossReport:
    values = {k: float(v) for k, v in components.items()}
    report = LossReport(**values, l_adv_d=float(l_adv_d))
    report.total = float(weighted_total(values, weights))
    return report


def latent_consistency(z: torch.Tensor, z_hat: torch.Tensor) -> torch.Tensor:
    if z.shape != z_hat.shape:
        raise ValueError(f"latent shapes differ: {tuple(z.shape)} vs {tuple(z_hat.shape)}")
    return (z - z_hat).square().mean()


def pose_consistency_terms(poses: torch.Tensor, poses_hat: torch.Tensor, pose_range: PoseRange) -> torch.Tensor:
    """Per-component mean squared error in unit pose coordinates, shape ``(3,)``.

    On a full-circle azimuth range the azimuth difference takes the short way
    round, so 359 vs 1 degree differs by 2/360.
    """
    if poses.shape != poses_hat.shape:
        raise ValueError(f"pose shapes differ: {tuple(poses.shape)} vs {tuple(poses_hat.shape)}")
    diff = pose_tensor_to_unit(poses, pose_range) - pose_tensor_to_unit(poses_hat, pose_range)
    if pose_range.full_circle:
        az = torch.remainder(diff[:, :1] + 0.5, 1.0) - 0.5
        diff = torch.cat([az, diff[:, 1:]], dim=1)
    return diff.square().mean(dim=0)


def pose_consistency(poses, poses_hat, pose_range: PoseRange) -> torch.Tensor:
    return pose_consistency_terms(poses, poses_hat, pose_range).mean()


def pixel_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).square().mean()


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-x.square() / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def ssim_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Local SSIM over every full window position (no padding), shape ``(N, C, H', W')``."""
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    c = a.shape[1]
    win = gaussian_window(dtype=a.dtype).to(a.device).expand(c, 1, SSIM_WINDOW, SSIM_WINDOW)

    def blur(x):
        return F.conv2d(x, win, groups=c)

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a.square()
    var_b = blur(b * b) - mu_b.square()
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a.square() + mu_b.square() + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a: torch.Tensor, b: torch.Tensor, per_image: bool = False) -> torch.Tensor:
    """Mean SSIM, channel-averaged; one value per image if ``per_image``."""
    m = ssim_map(a, b)
    return m.mean(dim=(1, 2, 3)) if per_image else m.mean()


def ssim_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return 1.0 - ssim(a, b)


class PerceptualExtractor(nn.Module):
    """Frozen conv pyramid shaped like the first two VGG16 blocks.

    ``mode="random"`` builds fixed, seeded random weights so desk runs need no
    downloads. ``mode="vgg16"`` loads ImageNet weights through torchvision and
    taps the activation after ``block2_conv2``.
    """

    def __init__(self, mode: str = "random", widths=(16, 32), seed: int = 1234):
        super().__init__()
        self.mode = mode
        if mode == "vgg16":
            from torchvision.models import VGG16_Weights, vgg16

            features = vgg16(weights=VGG16_Weights.IMAGENET1K_V1).features
            self.body = nn.Sequential(*list(features.children())[:9])
            self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).reshape(1, 3, 1, 1))
            self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).reshape(1, 3, 1, 1))
        elif mode == "random":
            w1, w2 = widths
            gen = torch.Generator().manual_seed(seed)
            convs = [nn.Conv2d(3, w1, 3, padding=1), nn.Conv2d(w1, w1, 3, padding=1),
                     nn.Conv2d(w1, w2, 3, padding=1), nn.Conv2d(w2, w2, 3, padding=1)]
            with torch.no_grad():
                for conv in convs:
                    fan_in = conv.in_channels * 9
                    conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                    conv.bias.zero_()
            self.body = nn.Sequential(convs[0], nn.ReLU(), convs[1], nn.ReLU(), nn.MaxPool2d(2),
                                      convs[2], nn.ReLU(), convs[3], nn.ReLU())
        else:
            raise ValueError(f"unknown perceptual extractor mode {mode!r}")
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # parameters stay frozen for the whole run
        return super().train(False)

    def forward(self, img: torch.Tensor) -> list[torch.Tensor]:
        """Features at each tap layer (a single tap: the second block's last conv)."""
        if self.mode == "vgg16":
            img = ((img + 1.0) / 2.0 - self.mean) / self.std
        return [self.body(img)]


def perceptual_loss(extractor: PerceptualExtractor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    total = 0.0
    for fa, fb in zip(extractor(a), extractor(b)):
        total = total + (fa - fb).square().mean()
    return total


def discriminator_loss(logit_real: torch.Tensor, logit_fake: torch.Tensor) -> torch.Tensor:
    real = F.binary_cross_entropy_with_logits(logit_real, torch.ones_like(logit_real))
    fake = F.binary_cross_entropy_with_logits(logit_fake, torch.zeros_like(logit_fake))
    return real + fake


def generator_loss(logit_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator objective."""
    return F.binary_cross_entropy_with_logits(logit_fake, torch.ones_like(logit_fake))


def adversarial_losses(logit_real, logit_fake):
    """Return ``(g_loss, d_loss)`` for the DCGAN objective."""
    return generator_loss(logit_fake), discriminator_loss(logit_real, logit_fake)


def reconstruction_losses(extractor, target, output) -> dict:
    return {
        "l_2": pixel_loss(target, output),
        "l_vgg": perceptual_loss(extractor, target, output),
        "l_ssim": ssim_loss(target, output),
    }


def distillation_losses(extractor, teacher_view, student_view) -> dict:
    rec = reconstruction_losses(extractor, teacher_view, student_view)
    return {"l_2_gen": rec["l_2"], "l_vgg_gen": rec["l_vgg"], "l_ssim_gen": rec["l_ssim"]}
