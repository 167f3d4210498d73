"""Image metrics, learned-frame pose regression, NVS/pose protocols and figure grids."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .datasets import DatasetSplit, float_to_bytes, to_numpy
from .exceptions import DataError
from .geometry import PoseRange, angular_difference
from .losses import ssim

PSNR_CAP = 100.0
ACC_THRESHOLD_DEG = 30.0


def metric_l1_255(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-image mean absolute difference on the [0, 255] scale."""
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a.double() - b.double()).abs() * 127.5).mean(dim=(1, 2, 3))


def metric_ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-image SSIM; same definition as the training loss."""
    return ssim(a.double(), b.double(), per_image=True)


def metric_psnr(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-image PSNR in dB on the byte scale, capped at ``PSNR_CAP`` for identical images."""
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = ((a.double() - b.double()) * 127.5).square().mean(dim=(1, 2, 3))
    psnr = 10.0 * torch.log10(255.0 ** 2 / mse)
    return torch.where(mse > 0, psnr.clamp(max=PSNR_CAP), torch.full_like(mse, PSNR_CAP))


def angle_error_deg(pred_az, gt_az) -> np.ndarray:
    """Azimuth error via the cosine of the difference, in degrees within [0, 180]."""
    diff = np.deg2rad(np.asarray(pred_az, dtype=np.float64) - np.asarray(gt_az, dtype=np.float64))
    return np.rad2deg(np.arccos(np.clip(np.cos(diff), -1.0, 1.0)))


# ---------------------------------------------------------------------------
# learned pose frame


@dataclass
class AffineFit:
    slope: float
    intercept: float
    residuals: np.ndarray
    r2: float

    def __call__(self, x):
        return self.slope * np.asarray(x, dtype=np.float64) + self.intercept


def _affine_lstsq(x, y) -> AffineFit:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 1:
        raise DataError("affine fit needs data")
    if np.unique(x).size < 2:
        # degenerate component (e.g. fixed scale): a pure offset, r2 undefined
        intercept = float(y.mean() - x[0])
        return AffineFit(1.0, intercept, y - (x + intercept), float("nan"))
    design = np.stack([x, np.ones_like(x)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(design, y, rcond=None)
    residuals = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(residuals ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return AffineFit(float(slope), float(intercept), residuals, r2)


def _unwrap_towards(y, reference):
    """Shift each angle in ``y`` by multiples of 360 to lie within 180 of ``reference``."""
    return reference + angular_difference(y, reference)


@dataclass
class PoseFrameMap:
    """Per-component affine map from ground-truth poses into the model's learned frame.

    ``rho`` regresses the ground-truth camera distance on the inverse of the
    learned scale.
    """

    azimuth: AffineFit
    elevation: AffineFit
    scale: AffineFit
    rho: Optional[AffineFit]
    full_circle: bool

    def apply(self, gt_poses) -> np.ndarray:
        gt = np.asarray(gt_poses, dtype=np.float64)
        out = np.stack([self.azimuth(gt[:, 0]), self.elevation(gt[:, 1]), self.scale(gt[:, 2])], axis=1)
        if self.full_circle:
            out[:, 0] = np.mod(out[:, 0], 360.0)
        return out

    def to_ground_truth(self, learned) -> np.ndarray:
        """Invert the map (learned frame -> ground-truth frame)."""
        learned = np.asarray(learned, dtype=np.float64)
        cols = []
        for i, fit in enumerate((self.azimuth, self.elevation, self.scale)):
            cols.append((learned[:, i] - fit.intercept) / fit.slope if fit.slope != 0 else np.full(len(learned), np.nan))
        out = np.stack(cols, axis=1)
        if self.full_circle:
            out[:, 0] = np.mod(out[:, 0], 360.0)
        return out

    def predict_rho(self, learned_scale) -> np.ndarray:
        if self.rho is None:
            raise DataError("frame was fitted without ground-truth rho")
        return self.rho(1.0 / np.asarray(learned_scale, dtype=np.float64))

    @property
    def r2(self) -> dict:
        return {"azimuth": self.azimuth.r2, "elevation": self.elevation.r2, "scale": self.scale.r2}


def fit_pose_frame(gt_poses, pred_poses, pose_range: PoseRange, gt_rho=None) -> PoseFrameMap:
    """Least-squares affine map per component from ground truth to predictions.

    On a full-circle range the predicted azimuths are first unwrapped
    against the better of the two circular alignments (same or opposite
    orientation), then fitted like the other components.
    """
    gt = np.asarray(gt_poses, dtype=np.float64)
    pred = np.asarray(pred_poses, dtype=np.float64)
    if gt.shape != pred.shape or gt.ndim != 2 or gt.shape[1] != 3:
        raise DataError(f"pose arrays must both be (N, 3), got {gt.shape} and {pred.shape}")
    az_gt, az_pred = gt[:, 0], pred[:, 0]
    if pose_range.full_circle:
        best = None
        for sign in (1.0, -1.0):
            delta = np.deg2rad(az_pred - sign * az_gt)
            offset = np.rad2deg(np.arctan2(np.sin(delta).mean(), np.cos(delta).mean()))
            unwrapped = _unwrap_towards(az_pred, sign * az_gt + offset)
            fit = _affine_lstsq(az_gt, unwrapped)
            if best is None or np.sum(fit.residuals ** 2) < np.sum(best.residuals ** 2):
                best = fit
        az_fit = best
    else:
        az_fit = _affine_lstsq(az_gt, az_pred)
    rho_fit = None
    if gt_rho is not None:
        rho_fit = _affine_lstsq(1.0 / pred[:, 2], np.asarray(gt_rho, dtype=np.float64))
    return PoseFrameMap(az_fit, _affine_lstsq(gt[:, 1], pred[:, 1]), _affine_lstsq(gt[:, 2], pred[:, 2]),
                        rho_fit, pose_range.full_circle)


# ---------------------------------------------------------------------------
# protocols


@dataclass
class EvalReport:
    l1_255: float = float("nan")
    ssim: float = float("nan")
    psnr: float = float("nan")
    angle_median_deg: float = float("nan")
    angle_acc_30: float = float("nan")
    rho_l1_median: float = float("nan")
    timing_mean_s: float = float("nan")
    timing_std_s: float = float("nan")
    n: int = 0
    rows: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("rows")
        return d

    def write_csv(self, path) -> None:
        """Per-item rows (the summary itself when there are none); aggregates go to :meth:`write_summary`."""
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        if not self.rows:
            keys = ["metric", "value"]
            rows = [{"metric": k, "value": v} for k, v in self.summary().items()]
        else:
            keys = list(self.rows[0])
            rows = self.rows
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            writer.writerows(rows)

    def write_summary(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        clean = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in self.summary().items()}
        Path(path).write_text(json.dumps(clean, indent=2, sort_keys=True))

    def format(self) -> str:
        lines = []
        for key, value in self.summary().items():
            if isinstance(value, float) and math.isnan(value):
                continue
            lines.append(f"{key:>18}: {value:.4f}" if isinstance(value, float) else f"{key:>18}: {value}")
        return "\n".join(lines)


@torch.no_grad()
def predict_poses(encoder, images: torch.Tensor, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    zs, poses = [], []
    for i in range(0, images.shape[0], batch_size):
        z, p = encoder(images[i:i + batch_size])
        zs.append(z)
        poses.append(p)
    return torch.cat(zs).numpy(), torch.cat(poses).double().numpy()


def fit_frame_on_splits(encoder, splits, pose_range: PoseRange) -> PoseFrameMap:
    """Fit the learned frame on labelled splits (training and validation only)."""
    gts, preds, rhos = [], [], []
    for split in splits:
        if split.poses is None:
            raise DataError(f"split {split.name!r} has no ground-truth poses")
        _, pred = predict_poses(encoder, split.tensors())
        gts.append(split.poses)
        preds.append(pred)
        rhos.append(split.rho if split.rho is not None else None)
    rho = None if any(r is None for r in rhos) else np.concatenate(rhos)
    return fit_pose_frame(np.concatenate(gts), np.concatenate(preds), pose_range, rho)


def view_pairs(split: DatasetSplit, max_pairs_per_object: Optional[int] = None) -> list[tuple[int, int]]:
    """All ordered (source, target) pairs of distinct views of one object."""
    pairs = []
    for _, members in sorted(split.view_groups().items()):
        obj_pairs = [(s, t) for s in members for t in members if s != t]
        if max_pairs_per_object is not None:
            obj_pairs = obj_pairs[:max_pairs_per_object]
        pairs.extend(obj_pairs)
    return pairs


@torch.no_grad()
def eval_nvs(decoder, encoder, split: DatasetSplit, frame: PoseFrameMap,
             max_pairs_per_object: Optional[int] = None, batch_size: int = 256) -> EvalReport:
    """Render each target view from the source's latent code and the mapped target pose."""
    if not split.has_ground_truth():
        raise DataError(f"split {split.name!r} lacks ground-truth poses or view groups")
    images = split.tensors()
    z_all, _ = predict_poses(encoder, images)
    target_poses = frame.apply(split.poses)
    pairs = view_pairs(split, max_pairs_per_object)
    rows = []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        src = np.array([s for s, _ in chunk])
        tgt = np.array([t for _, t in chunk])
        z = torch.from_numpy(z_all[src])
        poses = torch.from_numpy(target_poses[tgt]).float()
        rendered = decoder(z, poses)
        truth = images[tgt]
        l1 = metric_l1_255(rendered, truth).numpy()
        ss = metric_ssim(rendered, truth).numpy()
        ps = metric_psnr(rendered, truth).numpy()
        for k, (s, t) in enumerate(chunk):
            rows.append({"source": split.ids[s], "target": split.ids[t], "l1_255": float(l1[k]),
                         "ssim": float(ss[k]), "psnr": float(ps[k])})
    if not rows:
        raise DataError("no view pairs to evaluate")
    return EvalReport(l1_255=float(np.mean([r["l1_255"] for r in rows])),
                      ssim=float(np.mean([r["ssim"] for r in rows])),
                      psnr=float(np.mean([r["psnr"] for r in rows])), n=len(rows), rows=rows)


def pose_errors(pred_poses, gt_poses, frame: PoseFrameMap, gt_rho=None) -> dict:
    """Angle and rho errors after mapping predictions back to the ground-truth frame."""
    pred = np.asarray(pred_poses, dtype=np.float64)
    gt = np.asarray(gt_poses, dtype=np.float64)
    az = frame.to_ground_truth(pred)[:, 0]
    errors = angle_error_deg(az, gt[:, 0])
    out = {"angle_error": errors, "angle_median_deg": float(np.median(errors)),
           "angle_acc_30": float(np.mean(errors < ACC_THRESHOLD_DEG))}
    if gt_rho is not None and frame.rho is not None:
        rho_err = np.abs(frame.predict_rho(pred[:, 2]) - np.asarray(gt_rho))
        out["rho_error"] = rho_err
        out["rho_l1_median"] = float(np.median(rho_err))
    return out


@torch.no_grad()
def eval_pose(encoder, split: DatasetSplit, frame: PoseFrameMap) -> EvalReport:
    if split.poses is None:
        raise DataError(f"split {split.name!r} has no ground-truth poses")
    _, pred = predict_poses(encoder, split.tensors())
    errs = pose_errors(pred, split.poses, frame, split.rho)
    rows = [{"id": split.ids[i], "angle_error_deg": float(errs["angle_error"][i]),
             **({"rho_error": float(errs["rho_error"][i])} if "rho_error" in errs else {})}
            for i in range(len(split))]
    return EvalReport(angle_median_deg=errs["angle_median_deg"], angle_acc_30=errs["angle_acc_30"],
                      rho_l1_median=errs.get("rho_l1_median", float("nan")), n=len(split), rows=rows)


@torch.no_grad()
def reconstruct(decoder, encoder, images: torch.Tensor) -> torch.Tensor:
    z, poses = encoder(images)
    return decoder(z, poses)


@torch.no_grad()
def eval_reconstruction(decoder, encoder, images: torch.Tensor, ids=None) -> EvalReport:
    recon = reconstruct(decoder, encoder, images)
    l1 = metric_l1_255(recon, images).numpy()
    ss = metric_ssim(recon, images).numpy()
    ps = metric_psnr(recon, images).numpy()
    ids = ids if ids is not None else [str(i) for i in range(len(l1))]
    rows = [{"id": ids[i], "l1_255": float(l1[i]), "ssim": float(ss[i]), "psnr": float(ps[i])}
            for i in range(len(l1))]
    return EvalReport(l1_255=float(l1.mean()), ssim=float(ss.mean()), psnr=float(ps.mean()),
                      n=len(l1), rows=rows)


def timing_stats(seconds) -> tuple[float, float]:
    seconds = np.asarray(seconds, dtype=np.float64)
    return float(seconds.mean()), float(seconds.std())


# ---------------------------------------------------------------------------
# figures


def tile(images, rows: int, cols: int, pad: int = 0) -> np.ndarray:
    """Tile float ``(N, H, W, 3)`` images (``None`` = blank) into one uint8 raster."""
    first = next(im for im in images if im is not None)
    h, w = first.shape[:2]
    canvas = np.zeros((rows * (h + pad), cols * (w + pad), 3), dtype=np.uint8)
    for k, im in enumerate(images):
        if im is None:
            continue
        r, c = divmod(k, cols)
        canvas[r * (h + pad):r * (h + pad) + h, c * (w + pad):c * (w + pad) + w] = float_to_bytes(im)
    return canvas


@torch.no_grad()
def pose_swap_renders(decoder, encoder, identity_images: torch.Tensor, pose_images: torch.Tensor) -> torch.Tensor:
    """``out[i, j] = D(z of identity i, pose of image j)``, shape ``(I, J, 3, H, W)``."""
    z, _ = encoder(identity_images)
    _, poses = encoder(pose_images)
    n_i, n_j = z.shape[0], poses.shape[0]
    zz = z.repeat_interleave(n_j, dim=0)
    pp = poses.repeat(n_i, 1)
    return decoder(zz, pp).reshape(n_i, n_j, *identity_images.shape[1:])


def pose_swap_grid(decoder, encoder, identity_images: torch.Tensor, pose_images: torch.Tensor) -> np.ndarray:
    """Raster with pose sources along the top row and identity sources down the first column."""
    renders = pose_swap_renders(decoder, encoder, identity_images, pose_images)
    n_i, n_j = renders.shape[:2]
    cells = [None] + list(to_numpy(pose_images))
    ident = to_numpy(identity_images)
    for i in range(n_i):
        cells.append(ident[i])
        cells.extend(to_numpy(renders[i]))
    return tile(cells, n_i + 1, n_j + 1)


def sweep_azimuths(pose_range: PoseRange, n_views: int) -> np.ndarray:
    """Evenly spaced azimuths from the range's lower to upper end, inclusive."""
    if n_views < 1:
        raise ValueError("need at least one view")
    if n_views == 1:
        return np.array([pose_range.azimuth_min])
    return np.linspace(pose_range.azimuth_min, pose_range.azimuth_max, n_views)


@torch.no_grad()
def render_azimuths(decoder, z: torch.Tensor, pose: torch.Tensor, azimuths) -> torch.Tensor:
    """Renders of one latent code at each azimuth, elevation and scale held fixed."""
    n = len(azimuths)
    poses = pose.reshape(1, 3).repeat(n, 1).clone()
    poses[:, 0] = torch.as_tensor(np.asarray(azimuths), dtype=poses.dtype)
    return decoder(z.reshape(1, -1).repeat(n, 1), poses)


@torch.no_grad()
def theta_interpolation(decoder, encoder, image: torch.Tensor, n_views: int) -> torch.Tensor:
    """``n_views`` renders sweeping azimuth across the range for the image's latent code."""
    z, pose = encoder(image.reshape(1, *image.shape[-3:]))
    return render_azimuths(decoder, z[0], pose[0], sweep_azimuths(decoder.pose_range, n_views))


def theta_interpolation_strip(decoder, encoder, image: torch.Tensor, n_views: int) -> np.ndarray:
    """Input tile followed by ``n_views`` interpolated views."""
    views = theta_interpolation(decoder, encoder, image, n_views)
    cells = list(to_numpy(image.reshape(1, *image.shape[-3:]))) + list(to_numpy(views))
    return tile(cells, 1, n_views + 1)


def timed(fn, *args, **kwargs):
    start = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - start
