"""Input checks shared by the estimator wrapper and the command line."""
from __future__ import annotations

import numpy as np
import torch

from .datasets import bytes_to_float
from .exceptions import DataError


def check_images(images, resolution: int) -> torch.Tensor:
    """Coerce images to a float ``(N, 3, R, R)`` tensor in ``[-1, 1]``.

    Accepts uint8 ``(N, R, R, 3)`` arrays (byte scale), float NHWC arrays in
    ``[-1, 1]`` or float NCHW tensors. A single image may omit the batch axis.
    """
    if isinstance(images, torch.Tensor):
        x = images.detach().cpu()
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.dim() != 4 or x.shape[1] != 3:
            raise DataError(f"image tensors must be (N, 3, H, W), got {tuple(x.shape)}")
        x = x.float()
    else:
        arr = np.asarray(images)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise DataError(f"image arrays must be (N, H, W, 3), got {arr.shape}")
        if arr.dtype == np.uint8:
            arr = bytes_to_float(arr)
        elif not np.issubdtype(arr.dtype, np.floating):
            raise DataError(f"unsupported image dtype {arr.dtype}")
        x = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2), dtype=np.float32))
    if x.shape[0] == 0:
        raise DataError("no images given")
    if x.shape[2:] != (resolution, resolution):
        raise DataError(f"expected {resolution}x{resolution} images, got {tuple(x.shape[2:])}")
    if not torch.isfinite(x).all():
        raise DataError("images contain non-finite values")
    if x.min() < -1.0 - 1e-6 or x.max() > 1.0 + 1e-6:
        raise DataError("float images must lie in [-1, 1]")
    return x


def check_poses(poses, n=None) -> torch.Tensor:
    """``(N, 3)`` float tensor of (azimuth deg, elevation deg, scale)."""
    p = torch.as_tensor(np.asarray(poses, dtype=np.float32))
    if p.dim() == 1:
        p = p.unsqueeze(0)
    if p.dim() != 2 or p.shape[1] != 3:
        raise DataError(f"poses must be (N, 3), got {tuple(p.shape)}")
    if n is not None and p.shape[0] not in (1, n):
        raise DataError(f"expected 1 or {n} poses, got {p.shape[0]}")
    if not torch.isfinite(p).all() or (p[:, 2] <= 0).any():
        raise DataError("poses must be finite with positive scale")
    return p


def check_codes(codes, latent_dim: int) -> torch.Tensor:
    """``(N, latent_dim + 3)`` rows of latent code followed by pose."""
    c = torch.as_tensor(np.asarray(codes, dtype=np.float32))
    if c.dim() == 1:
        c = c.unsqueeze(0)
    if c.dim() != 2 or c.shape[1] != latent_dim + 3:
        raise DataError(f"codes must be (N, {latent_dim + 3}), got {tuple(c.shape)}")
    check_poses(c[:, latent_dim:])
    return c
