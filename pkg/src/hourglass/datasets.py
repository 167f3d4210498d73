"""Image conversion, real-dataset preprocessing, the procedural cuboid set and manifests."""
from __future__ import annotations

import colorsys
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch
from PIL import Image as PILImage

from .exceptions import DataError
from .geometry import PoseRange

MANIFEST_NAME = "manifest.tsv"
MANIFEST_FIELDS = ("id", "path", "split", "bbox", "azimuth", "elevation", "scale", "rho", "group")

# train / val / test image counts per named corpus
SPLIT_COUNTS = {
    "celeba": (162770, 19867, 19962),
    "real_cars": (95410, 13633, 27267),
    "shapenet_cars": (125928, 18000, 35976),
    "shapenet_sofa": (53304, 7608, 15239),
}
# ShapeNet splits are made per model; the real corpora per image
OBJECT_FRACTIONS = {"train": 0.7, "test": 0.2, "val": 0.1}


def bytes_to_float(arr) -> np.ndarray:
    """uint8 -> float32 in [-1, 1] as ``b / 127.5 - 1``."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise DataError(f"expected uint8 pixels, got {arr.dtype}")
    return (arr.astype(np.float64) / 127.5 - 1.0).astype(np.float32)


def float_to_bytes(arr) -> np.ndarray:
    """Float in [-1, 1] -> uint8 as ``round(clamp((f + 1) * 127.5, 0, 255))``."""
    arr = np.asarray(arr, dtype=np.float64)
    return np.rint(np.clip((arr + 1.0) * 127.5, 0.0, 255.0)).astype(np.uint8)


def to_tensor(images) -> torch.Tensor:
    """``(N, H, W, 3)`` uint8 or float array -> float32 ``(N, 3, H, W)`` tensor."""
    images = np.asarray(images)
    if images.dtype == np.uint8:
        images = bytes_to_float(images)
    if images.ndim == 3:
        images = images[None]
    return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)).permute(0, 3, 1, 2).contiguous()


def to_numpy(images: torch.Tensor) -> np.ndarray:
    """Float ``(N, 3, H, W)`` tensor -> float ``(N, H, W, 3)`` array."""
    return images.detach().cpu().permute(0, 2, 3, 1).numpy()


def read_image(path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def write_image(path, pixels) -> None:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        pixels = float_to_bytes(pixels)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(pixels).save(path)


def resize_bytes(raw: np.ndarray, resolution: int) -> np.ndarray:
    if raw.shape[0] == resolution and raw.shape[1] == resolution:
        return raw
    return np.asarray(PILImage.fromarray(raw).resize((resolution, resolution), PILImage.BILINEAR))


def center_square(height: int, width: int) -> tuple[int, int, int]:
    """``(top, left, side)`` of the centred square with side ``min(height, width)``."""
    side = min(height, width)
    return (height - side) // 2, (width - side) // 2, side


def preprocess_celeba(raw, face_box=None, resolution: int = 128) -> np.ndarray:
    """Centre-crop an aligned portrait to a square, resize, normalise.

    ``face_box`` is accepted for interface symmetry with the cars pipeline;
    aligned inputs are cropped about the image centre regardless.
    """
    raw = np.asarray(raw, dtype=np.uint8)
    if raw.ndim != 3 or min(raw.shape[:2]) < 1:
        raise DataError(f"degenerate image of shape {raw.shape}")
    top, left, side = center_square(*raw.shape[:2])
    crop = raw[top:top + side, left:left + side]
    return bytes_to_float(resize_bytes(crop, resolution))


def car_square(height: int, width: int, bbox) -> tuple[int, int, int]:
    """Square crop for a car bounding box as ``(top, left, side)``.

    The square shares the box centre and has the box's longest side. When it
    would leave the image, the side shrinks to the largest square that fits
    and the window shifts minimally to stay in bounds.
    """
    x0, y0, x1, y1 = (float(v) for v in bbox)
    bw, bh = x1 - x0, y1 - y0
    if bw <= 0 or bh <= 0:
        raise DataError(f"empty bounding box {bbox}")
    side = int(round(max(bw, bh)))
    side = max(1, min(side, height, width))
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    left = int(math.floor(cx - side / 2.0 + 0.5))
    top = int(math.floor(cy - side / 2.0 + 0.5))
    left = min(max(left, 0), width - side)
    top = min(max(top, 0), height - side)
    return top, left, side


def preprocess_cars(raw, bbox, resolution: int = 128) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.uint8)
    if raw.ndim != 3 or min(raw.shape[:2]) < 1:
        raise DataError(f"degenerate image of shape {raw.shape}")
    top, left, side = car_square(raw.shape[0], raw.shape[1], bbox)
    crop = raw[top:top + side, left:left + side]
    return bytes_to_float(resize_bytes(crop, resolution))


# ---------------------------------------------------------------------------
# procedural cuboids


@dataclass(frozen=True)
class Cuboid:
    """Identity of a synthetic object: box half-extents, per-face colours and stripe count.

    Faces are ordered +x, -x, +y, -y, +z, -z. Colours follow a category-wide
    layout (light front at +z, dark back, striped +x side, plain -x side) so
    the pose is recoverable from a single view, while hue, size and stripe
    count vary per identity.
    """

    half_extents: tuple
    face_colors: tuple
    stripes: int = 2
    striped_faces: tuple = (0,)

    @classmethod
    def random(cls, rng: np.random.Generator) -> "Cuboid":
        half = (float(rng.uniform(0.25, 0.4)), float(rng.uniform(0.2, 0.35)), float(rng.uniform(0.45, 0.65)))
        hue = colorsys.hsv_to_rgb(float(rng.uniform()), float(rng.uniform(0.5, 1.0)), 1.0)
        base = np.asarray(hue)
        layout = [
            0.85 * base,                      # +x: striped side
            0.65 * base,                      # -x: plain side
            0.5 * base + 0.5,                 # +y: top, washed out
            0.25 * base,                      # -y: bottom
            np.array([0.95, 0.95, 0.85]),     # +z: front
            0.35 * base + 0.05,               # -z: back
        ]
        colors = tuple(tuple(float(c) for c in np.clip(row, 0.0, 1.0)) for row in layout)
        return cls(half, colors, int(rng.integers(1, 4)))


def _camera(pose):
    az, el = np.deg2rad(pose[0]), np.deg2rad(pose[1])
    view = np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
    right = np.array([np.cos(az), 0.0, -np.sin(az)])
    up = np.cross(view, right)
    return view, right, up


def _raycast(cuboid: Cuboid, pose, size: int, extent: float):
    """Orthographic ray cast; returns (face index or -1, local face coordinate) per pixel."""
    view, right, up = _camera(pose)
    coords = ((np.arange(size) + 0.5) / size * 2.0 - 1.0) * extent / pose[2]
    sx = coords[None, :]
    sy = -coords[:, None]
    origin = sx[..., None] * right + sy[..., None] * up + 10.0 * view
    direction = -view
    half = np.asarray(cuboid.half_extents)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / direction
        t1 = (-half - origin) * inv
        t2 = (half - origin) * inv
    # rays parallel to a slab: inside -> unbounded, outside -> miss
    parallel = direction == 0
    inside = np.abs(origin) <= half
    t_lo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    t_hi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_near = t_lo.max(axis=-1)
    t_far = t_hi.min(axis=-1)
    hit = t_near <= t_far
    axis = t_lo.argmax(axis=-1)
    point = origin + np.where(hit, t_near, 0.0)[..., None] * direction
    sign_positive = np.take_along_axis(point, axis[..., None], -1)[..., 0] > 0
    face = np.where(hit, 2 * axis + np.where(sign_positive, 0, 1), -1)
    # texture coordinate: the next axis along, normalised to [-1, 1]
    nxt = (axis + 1) % 3
    local = np.take_along_axis(point, nxt[..., None], -1)[..., 0] / half[nxt]
    return face, local


RENDER_EXTENT = 1.3


def render_face_ids(cuboid: Cuboid, pose, resolution: int) -> np.ndarray:
    """Which face each pixel sees (``-1`` for background)."""
    return _raycast(cuboid, np.asarray(pose, dtype=np.float64), resolution, RENDER_EXTENT)[0]


def synth_render(cuboid: Cuboid, pose, resolution: int = 32, supersample: int = 2) -> np.ndarray:
    """Render the cuboid at ``pose`` on black; returns uint8 ``(H, W, 3)``.

    Orthographic projection, 2x2 supersampled. Pure function of its inputs.
    """
    pose = np.asarray(pose, dtype=np.float64)
    size = resolution * supersample
    face, local = _raycast(cuboid, pose, size, RENDER_EXTENT)
    colors = np.asarray(cuboid.face_colors)
    stripe = np.where(np.sin(np.pi * cuboid.stripes * (local + 1.0)) >= 0, 1.0, 0.6)
    stripe = np.where(np.isin(face, cuboid.striped_faces), stripe, 1.0)
    rgb = colors[np.clip(face, 0, 5)] * stripe[..., None]
    rgb = np.where((face >= 0)[..., None], rgb, 0.0)
    rgb = rgb.reshape(resolution, supersample, resolution, supersample, 3).mean(axis=(1, 3))
    return np.rint(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def rho_from_scale(scale, pose_range: PoseRange):
    """Camera distance for a magnification; inversely related, mapping the scale range onto itself."""
    return pose_range.scale_min * pose_range.scale_max / np.asarray(scale, dtype=np.float64)


# ---------------------------------------------------------------------------
# splits


@dataclass
class DatasetSplit:
    """Ordered images of one split plus evaluation-only ground truth.

    ``images`` is uint8 ``(N, H, W, 3)``. ``poses`` rows are (azimuth,
    elevation, scale); ``rho`` is the camera distance; ``groups`` holds the
    object id of each view. Training code must go through
    :func:`iter_training_batches`, which only yields pixels.
    """

    name: str
    ids: list
    images: np.ndarray
    poses: Optional[np.ndarray] = None
    rho: Optional[np.ndarray] = None
    groups: Optional[np.ndarray] = None
    identities: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.ids)

    @property
    def resolution(self) -> int:
        return int(self.images.shape[1])

    def has_ground_truth(self) -> bool:
        return self.poses is not None and self.groups is not None

    def subset(self, index) -> "DatasetSplit":
        index = np.asarray(index)
        pick = lambda a: None if a is None else a[index]
        return DatasetSplit(self.name, [self.ids[i] for i in index], self.images[index],
                            pick(self.poses), pick(self.rho), pick(self.groups), dict(self.identities))

    def tensors(self) -> torch.Tensor:
        return to_tensor(self.images)

    def view_groups(self) -> dict:
        if self.groups is None:
            raise DataError(f"split {self.name!r} has no multi-view grouping")
        out: dict = {}
        for i, g in enumerate(self.groups):
            out.setdefault(int(g), []).append(i)
        return out


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffle order as a pure function of ``(seed, epoch)``."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def iter_training_batches(split: DatasetSplit, batch_size: int, seed: int, epoch: int,
                          drop_last: bool = True) -> Iterator[torch.Tensor]:
    """Float ``(B, 3, H, W)`` batches in a seeded order; never exposes labels."""
    order = epoch_order(len(split), seed, epoch)
    stop = len(order) - (len(order) % batch_size if drop_last else 0)
    for start in range(0, stop, batch_size):
        idx = order[start:start + batch_size]
        yield to_tensor(split.images[idx])


def make_synthetic_split(n_objects: int, views_per_object: int, pose_range: PoseRange, seed: int,
                         resolution: int = 32, name: str = "all", first_object: int = 0) -> DatasetSplit:
    """Random cuboids, each rendered from ``views_per_object`` random poses."""
    if n_objects < 1 or views_per_object < 1:
        raise DataError("object and view counts must be positive")
    rng = np.random.default_rng(seed)
    lows, highs = pose_range.lows, pose_range.highs
    ids, images, poses, groups, identities = [], [], [], [], {}
    for obj in range(first_object, first_object + n_objects):
        cuboid = Cuboid.random(rng)
        identities[obj] = cuboid
        for view in range(views_per_object):
            pose = lows + rng.uniform(size=3) * (highs - lows)
            pose[0] %= 360.0
            ids.append(f"obj{obj:05d}_v{view:03d}")
            images.append(synth_render(cuboid, pose, resolution))
            poses.append(pose)
            groups.append(obj)
    poses = np.array(poses)
    return DatasetSplit(name, ids, np.stack(images), poses, rho_from_scale(poses[:, 2], pose_range),
                        np.array(groups), identities)


def make_synthetic_dataset(n_objects: int, views_per_object: int, pose_range: PoseRange, seed: int,
                           resolution: int = 32) -> dict:
    """Synthetic train/val/test splits, disjoint by object (70/10/20)."""
    full = make_synthetic_split(n_objects, views_per_object, pose_range, seed, resolution)
    objects = np.random.default_rng([seed, 1]).permutation(n_objects)
    n_train = int(round(OBJECT_FRACTIONS["train"] * n_objects))
    n_test = int(round(OBJECT_FRACTIONS["test"] * n_objects))
    parts = {"train": objects[:n_train], "test": objects[n_train:n_train + n_test],
             "val": objects[n_train + n_test:]}
    out = {}
    for name, objs in parts.items():
        index = np.flatnonzero(np.isin(full.groups, np.sort(objs)))
        split = full.subset(index)
        split.name = name
        split.identities = {int(o): full.identities[int(o)] for o in objs}
        out[name] = split
    return out


def split_sizes(name: str, total: int) -> tuple[int, int, int]:
    """Train/val/test sizes for a named corpus of ``total`` images.

    Exact published counts when ``total`` matches the full corpus, the same
    proportions otherwise.
    """
    if name not in SPLIT_COUNTS:
        raise DataError(f"unknown dataset {name!r}")
    counts = SPLIT_COUNTS[name]
    if total == sum(counts):
        return counts
    n_train = int(round(total * counts[0] / sum(counts)))
    n_val = int(round(total * counts[1] / sum(counts)))
    return n_train, n_val, total - n_train - n_val


# ---------------------------------------------------------------------------
# manifests


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_manifest(root, splits: dict) -> Path:
    """Write every split's images as PNG plus one tab-separated manifest."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    path = root / MANIFEST_NAME
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for split_name, split in splits.items():
            for i, sample_id in enumerate(split.ids):
                rel = f"images/{sample_id}.png"
                write_image(root / rel, split.images[i])
                pose = split.poses[i] if split.poses is not None else (None, None, None)
                rho = split.rho[i] if split.rho is not None else None
                group = int(split.groups[i]) if split.groups is not None else None
                writer.writerow([sample_id, rel, split_name, "", _fmt(pose[0]), _fmt(pose[1]),
                                 _fmt(pose[2]), _fmt(rho), _fmt(group)])
    return path


def read_manifest(path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        if reader.fieldnames is None or not {"id", "path"} <= set(reader.fieldnames):
            raise DataError(f"manifest {path} lacks the id/path columns")
        rows = []
        for row in reader:
            rec = {"id": row["id"], "path": path.parent / row["path"], "split": row.get("split") or "train"}
            bbox = (row.get("bbox") or "").strip()
            rec["bbox"] = tuple(float(v) for v in bbox.split(",")) if bbox else None
            pose = [row.get(k, "") for k in ("azimuth", "elevation", "scale")]
            rec["pose"] = tuple(float(v) for v in pose) if all(pose) else None
            rec["rho"] = float(row["rho"]) if row.get("rho") else None
            rec["group"] = int(row["group"]) if row.get("group") else None
            rows.append(rec)
    return rows


def load_split(path, split: str, resolution: int, dataset: str = "synthetic") -> DatasetSplit:
    """Load one split of a manifest, applying the dataset's preprocessing."""
    rows = [r for r in read_manifest(path) if r["split"] == split]
    if not rows:
        raise DataError(f"no samples for split {split!r} in {path}")
    images = []
    for r in rows:
        raw = read_image(r["path"])
        if dataset == "celeba":
            img = float_to_bytes(preprocess_celeba(raw, resolution=resolution))
        elif dataset == "real_cars":
            if r["bbox"] is None:
                raise DataError(f"sample {r['id']} has no bounding box")
            img = float_to_bytes(preprocess_cars(raw, r["bbox"], resolution=resolution))
        else:
            if raw.shape[0] != raw.shape[1]:
                raise DataError(f"sample {r['id']} is not square")
            img = resize_bytes(raw, resolution)
        images.append(img)
    poses = np.array([r["pose"] for r in rows]) if all(r["pose"] for r in rows) else None
    rho = np.array([r["rho"] for r in rows]) if all(r["rho"] is not None for r in rows) else None
    groups = np.array([r["group"] for r in rows]) if all(r["group"] is not None for r in rows) else None
    return DatasetSplit(split, [r["id"] for r in rows], np.stack(images), poses, rho, groups)
