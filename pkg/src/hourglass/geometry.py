"""Poses, pose ranges and differentiable rigid transforms of feature volumes.

Volumes are handled in the torch layout ``(N, C, D, H, W)``: depth is the
viewing axis that :func:`project_volume` collapses, height is the vertical
axis (azimuth rotates about it) and width is the horizontal axis (elevation
rotates about it).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .exceptions import ConfigError


@dataclass(frozen=True)
class PoseRange:
    azimuth_min: float
    azimuth_max: float
    elevation_min: float
    elevation_max: float
    scale_min: float
    scale_max: float

    def __post_init__(self):
        for name in ("azimuth", "elevation", "scale"):
            lo, hi = getattr(self, f"{name}_min"), getattr(self, f"{name}_max")
            if not lo <= hi:
                raise ConfigError(f"{name}_min={lo} exceeds {name}_max={hi}")
        if self.scale_min <= 0:
            raise ConfigError("scale range must be strictly positive")

    @property
    def full_circle(self) -> bool:
        """True when the azimuth range covers all 360 degrees."""
        return math.isclose(self.azimuth_max - self.azimuth_min, 360.0)

    @property
    def lows(self) -> np.ndarray:
        return np.array([self.azimuth_min, self.elevation_min, self.scale_min])

    @property
    def highs(self) -> np.ndarray:
        return np.array([self.azimuth_max, self.elevation_max, self.scale_max])

    @property
    def canonical(self) -> "Pose":
        """Midpoint pose; the decoder treats it as the identity rotation."""
        mid = (self.lows + self.highs) / 2.0
        return Pose(float(mid[0]) % 360.0, float(mid[1]), float(mid[2]))

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in self.__dataclass_fields__}


# Azimuth / elevation / scale ranges per dataset.
POSE_RANGES = {
    "celeba": PoseRange(220.0, 320.0, 70.0, 110.0, 1.0, 1.0),
    "real_cars": PoseRange(0.0, 360.0, 60.0, 95.0, 1.0, 1.5),
    "shapenet_cars": PoseRange(0.0, 360.0, 25.0, 30.0, 1.0, 1.5),
    "shapenet_sofa": PoseRange(0.0, 360.0, 25.0, 30.0, 1.0, 1.5),
    # desk-scale procedural cuboids; elevation span widened so tilt is visible at 32px
    "synthetic": PoseRange(0.0, 360.0, 10.0, 50.0, 1.0, 1.5),
}


@dataclass(frozen=True)
class Pose:
    azimuth_deg: float
    elevation_deg: float
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "azimuth_deg", float(self.azimuth_deg) % 360.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.azimuth_deg, self.elevation_deg, self.scale])

    def in_range(self, pose_range: PoseRange, atol: float = 1e-9) -> bool:
        el_ok = pose_range.elevation_min - atol <= self.elevation_deg <= pose_range.elevation_max + atol
        sc_ok = pose_range.scale_min - atol <= self.scale <= pose_range.scale_max + atol
        if pose_range.full_circle:
            az_ok = True
        else:
            off = (self.azimuth_deg - pose_range.azimuth_min) % 360.0
            az_ok = off <= pose_range.azimuth_max - pose_range.azimuth_min + atol or off >= 360.0 - atol
        return el_ok and sc_ok and az_ok


def remap_unit_to_pose(u, pose_range: PoseRange) -> Pose:
    """Affine map of a unit triple onto ``pose_range``."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (3,):
        raise ValueError(f"expected a triple, got shape {u.shape}")
    if np.any(u < 0.0) or np.any(u > 1.0) or not np.all(np.isfinite(u)):
        raise ValueError(f"unit coordinates must lie in [0, 1], got {u}")
    vals = pose_range.lows + u * (pose_range.highs - pose_range.lows)
    return Pose(*vals)


def remap_pose_to_unit(pose: Pose, pose_range: PoseRange) -> np.ndarray:
    """Inverse of :func:`remap_unit_to_pose`.

    Degenerate components (min == max) map to 0.5. On a full-circle range an
    azimuth at the upper end wraps onto the lower end, so 360 degrees and 0
    degrees share the coordinate 0.
    """
    vals = pose.as_array()
    lo, hi = pose_range.lows, pose_range.highs
    span = hi - lo
    out = np.empty(3)
    az_off = (vals[0] - lo[0]) % 360.0
    vals = np.array([lo[0] + az_off, vals[1], vals[2]])
    for i in range(3):
        out[i] = 0.5 if span[i] == 0 else (vals[i] - lo[i]) / span[i]
    return out


def unit_to_pose_tensor(u: torch.Tensor, pose_range: PoseRange) -> torch.Tensor:
    """Batched differentiable version of :func:`remap_unit_to_pose` on ``(N, 3)``."""
    lo = torch.as_tensor(pose_range.lows, dtype=u.dtype, device=u.device)
    hi = torch.as_tensor(pose_range.highs, dtype=u.dtype, device=u.device)
    return lo + u * (hi - lo)


def pose_tensor_to_unit(poses: torch.Tensor, pose_range: PoseRange) -> torch.Tensor:
    """Batched inverse map; azimuth is reduced modulo 360 on full-circle ranges."""
    lo = torch.as_tensor(pose_range.lows, dtype=poses.dtype, device=poses.device)
    span = torch.as_tensor(pose_range.highs - pose_range.lows, dtype=poses.dtype, device=poses.device)
    shifted = poses - lo
    if pose_range.full_circle:
        shifted = torch.cat([torch.remainder(shifted[:, :1], 360.0), shifted[:, 1:]], dim=1)
    safe = torch.where(span == 0, torch.ones_like(span), span)
    unit = shifted / safe
    return torch.where(span == 0, torch.full_like(unit, 0.5), unit)


def sample_poses(generator: torch.Generator, n: int, pose_range: PoseRange,
                 dtype=torch.float32) -> torch.Tensor:
    """Uniform poses inside the range, shape ``(n, 3)``."""
    u = torch.rand(n, 3, generator=generator, dtype=dtype)
    return unit_to_pose_tensor(u, pose_range)


def rotation_matrix(azimuth_rad: torch.Tensor, elevation_rad: torch.Tensor) -> torch.Tensor:
    """Rotation applying azimuth (about the vertical axis) then elevation.

    Matrices act on ``(x, y, z) = (width, height, depth)`` coordinates; the
    result has shape ``(N, 3, 3)``.
    """
    ca, sa = torch.cos(azimuth_rad), torch.sin(azimuth_rad)
    ce, se = torch.cos(elevation_rad), torch.sin(elevation_rad)
    one, zero = torch.ones_like(ca), torch.zeros_like(ca)
    r_az = torch.stack([
        torch.stack([ca, zero, sa], -1),
        torch.stack([zero, one, zero], -1),
        torch.stack([-sa, zero, ca], -1),
    ], -2)
    r_el = torch.stack([
        torch.stack([one, zero, zero], -1),
        torch.stack([zero, ce, -se], -1),
        torch.stack([zero, se, ce], -1),
    ], -2)
    return r_el @ r_az


def _check_volume(volume: torch.Tensor):
    if volume.dim() != 5:
        raise ValueError(f"expected (N, C, D, H, W) volume, got shape {tuple(volume.shape)}")
    d, h, w = volume.shape[2:]
    if not d == h == w:
        raise ValueError(f"volume grid must be cubic, got {d}x{h}x{w}")


def trilinear_sample(volume: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Sample ``volume`` at fractional voxel coordinates with zero padding.

    Args:
        volume: ``(N, C, D, H, W)``.
        coords: ``(N, P, 3)`` as ``(x, y, z)`` = (width, height, depth) voxel
            indices. Integer coordinates hit voxel centres exactly.

    Returns:
        ``(N, C, P)`` samples, differentiable w.r.t. both inputs.
    """
    n, c, d, h, w = volume.shape
    flat = volume.reshape(n, c, d * h * w)
    base = torch.floor(coords)
    frac = coords - base
    base = base.long()
    out = None
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                ix = base[..., 0] + dx
                iy = base[..., 1] + dy
                iz = base[..., 2] + dz
                wx = frac[..., 0] if dx else 1.0 - frac[..., 0]
                wy = frac[..., 1] if dy else 1.0 - frac[..., 1]
                wz = frac[..., 2] if dz else 1.0 - frac[..., 2]
                valid = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h) & (iz >= 0) & (iz < d)
                idx = (iz.clamp(0, d - 1) * h + iy.clamp(0, h - 1)) * w + ix.clamp(0, w - 1)
                vals = torch.gather(flat, 2, idx.unsqueeze(1).expand(n, c, idx.shape[1]))
                weight = (wx * wy * wz * valid.to(coords.dtype)).unsqueeze(1)
                term = vals * weight
                out = term if out is None else out + term
    return out


def rigid_transform_volume(volume: torch.Tensor, poses: torch.Tensor,
                           canonical=(0.0, 0.0)) -> torch.Tensor:
    """Resample a feature volume under a rigid rotation plus uniform scaling.

    The object is rotated by ``azimuth - canonical[0]`` about the vertical axis,
    then by ``elevation - canonical[1]`` about the horizontal axis, and
    magnified by ``scale`` about the grid centre. Samples falling outside the
    grid read as zero.

    Args:
        volume: ``(N, C, D, H, W)`` cubic grid.
        poses: ``(N, 3)`` rows of (azimuth deg, elevation deg, scale).
        canonical: angles (deg) that map to the identity rotation.
    """
    _check_volume(volume)
    n, _, size = volume.shape[:3]
    if poses.shape != (n, 3):
        raise ValueError(f"expected poses of shape ({n}, 3), got {tuple(poses.shape)}")
    poses = poses.to(volume.dtype)
    az = torch.deg2rad(poses[:, 0] - canonical[0])
    el = torch.deg2rad(poses[:, 1] - canonical[1])
    rot = rotation_matrix(az, el)
    centre = (size - 1) / 2.0
    rng = torch.arange(size, dtype=volume.dtype, device=volume.device)
    zz, yy, xx = torch.meshgrid(rng, rng, rng, indexing="ij")
    out_pts = torch.stack([xx, yy, zz], -1).reshape(1, -1, 3) - centre
    # inverse map: output point -> source point; R is orthonormal so R^-1 = R^T
    src = (out_pts @ rot) / poses[:, 2].reshape(n, 1, 1) + centre
    sampled = trilinear_sample(volume, src)
    return sampled.reshape(volume.shape)


def project_volume(volume: torch.Tensor) -> torch.Tensor:
    """Stack depth slices into channels: ``(N, C, D, H, W) -> (N, D*C, H, W)``.

    Slice ``d`` occupies output channels ``[d*C, (d+1)*C)``; the learned
    1x1 mixing that follows lives in the decoder.
    """
    if volume.dim() != 5:
        raise ValueError(f"expected (N, C, D, H, W) volume, got shape {tuple(volume.shape)}")
    n, c, d, h, w = volume.shape
    return volume.permute(0, 2, 1, 3, 4).reshape(n, d * c, h, w)


def angular_difference(a, b):
    """Signed ``a - b`` wrapped into ``[-180, 180)`` degrees (numpy or torch)."""
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        return torch.remainder(a - b + 180.0, 360.0) - 180.0
    return np.mod(np.asarray(a) - np.asarray(b) + 180.0, 360.0) - 180.0
