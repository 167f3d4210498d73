"""scikit-learn style wrapper around the two-stage pipeline.

``transform`` maps images to rows of ``[z, azimuth, elevation, scale]``;
``inverse_transform`` renders such rows back to images, so re-posing an
image is ``inverse_transform`` of an edited ``transform``.
"""
from __future__ import annotations

import copy
import tempfile

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import config as C
from .datasets import DatasetSplit, float_to_bytes, to_numpy
from .evaluation import metric_l1_255
from .geometry import POSE_RANGES
from .pipeline import make_extractor, train
from .training import finetune_image
from .validation import check_codes, check_images, check_poses


class HourglassNVS(TransformerMixin, BaseEstimator):
    """Unsupervised novel view synthesis from single images.

    Args:
        pose_range: key of the built-in pose ranges ("synthetic", "celeba", ...).
        resolution: square image side; a power-of-two multiple of the feature volume size.
        latent_dim: length of the identity code.
        stage1_epochs: epochs of generative pretraining.
        stage2_epochs: epochs of autoencoding with self-distillation; 0 stops after stage 1.
        lr: Adam learning rate for both stages.
        batch_size: images per step.
        use_distillation: enable the self-distillation terms in stage 2.
        use_multiview: render the distillation source from a second random pose.
        perceptual: "random" (frozen random features) or "vgg16".
        seed: seed for initialisation, sampling and shuffling.
        model: optional dict of further ``ModelConfig`` overrides (channel widths etc.).
        work_dir: where checkpoints go (a temporary directory when None).
    """

    def __init__(self, pose_range="synthetic", resolution=32, latent_dim=128, stage1_epochs=24, stage2_epochs=10,
                 lr=2e-4, batch_size=16, use_distillation=True, use_multiview=True, perceptual="random",
                 seed=0, model=None, work_dir=None):
        self.pose_range = pose_range
        self.resolution = resolution
        self.latent_dim = latent_dim
        self.stage1_epochs = stage1_epochs
        self.stage2_epochs = stage2_epochs
        self.lr = lr
        self.batch_size = batch_size
        self.use_distillation = use_distillation
        self.use_multiview = use_multiview
        self.perceptual = perceptual
        self.seed = seed
        self.model = model
        self.work_dir = work_dir

    def _config(self) -> C.RunConfig:
        cfg = C.desk_config()
        cfg.dataset.name = self.pose_range
        cfg.dataset.pose_range = POSE_RANGES[self.pose_range]
        for key, value in (self.model or {}).items():
            if not hasattr(cfg.model, key):
                raise ValueError(f"unknown model option {key!r}")
            setattr(cfg.model, key, value)
        cfg.model.resolution = self.resolution
        cfg.model.latent_dim = self.latent_dim
        _ = cfg.model.n_2d_up  # raises early on a bad resolution
        for stage_cfg, epochs in ((cfg.stage1, self.stage1_epochs), (cfg.stage2, self.stage2_epochs)):
            stage_cfg.epochs = epochs
            stage_cfg.decay_start_epoch = max(epochs * 2 // 3, 0)
            stage_cfg.lr = self.lr
            stage_cfg.batch_size = self.batch_size
        cfg.stage2.use_distillation = self.use_distillation
        cfg.stage2.use_multiview = self.use_multiview
        cfg.perceptual = self.perceptual
        cfg.seed = self.seed
        return cfg

    def fit(self, X, y=None):
        """Train on unlabelled images ``X``; ``y`` is ignored."""
        if self.pose_range not in POSE_RANGES:
            raise ValueError(f"unknown pose range {self.pose_range!r}")
        cfg = self._config()
        x = check_images(X, self.resolution)
        if x.shape[0] < self.batch_size:
            raise ValueError(f"need at least batch_size={self.batch_size} images, got {x.shape[0]}")
        images = float_to_bytes(to_numpy(x))
        split = DatasetSplit("train", [str(i) for i in range(len(images))], images)
        out = self.work_dir or tempfile.mkdtemp(prefix="hourglass-")
        state = train(cfg, 1, {"train": split}, out_dir=out)
        self.stage_ = 1
        if self.stage2_epochs > 0:
            state = train(cfg, 2, {"train": split}, out_dir=out, init_from=f"{out}/stage1/last")
            self.stage_ = 2
        self.config_ = cfg
        self.decoder_ = state.decoder.eval()
        self.encoder_ = state.encoder.eval()
        self.discriminator_ = state.discriminator.eval()
        self.history_ = [r.as_dict() for r in state.history]
        self.output_dir_ = out
        self.n_features_in_ = self.resolution * self.resolution * 3
        return self

    @torch.no_grad()
    def encode(self, X):
        """``(z, poses)`` arrays for images ``X``."""
        check_is_fitted(self, "encoder_")
        z, poses = self.encoder_(check_images(X, self.resolution))
        return z.numpy(), poses.numpy()

    def transform(self, X):
        z, poses = self.encode(X)
        return np.concatenate([z, poses], axis=1)

    def predict(self, X):
        """Poses (azimuth deg, elevation deg, scale) in the learned frame."""
        return self.encode(X)[1]

    @torch.no_grad()
    def inverse_transform(self, codes):
        """Uint8 ``(N, R, R, 3)`` renders of ``[z, pose]`` rows."""
        check_is_fitted(self, "decoder_")
        c = check_codes(codes, self.latent_dim)
        out = self.decoder_(c[:, :self.latent_dim], c[:, self.latent_dim:])
        return float_to_bytes(to_numpy(out))

    def render(self, X, poses):
        """Re-render every image of ``X`` at ``poses`` (one pose, or one per image)."""
        z, _ = self.encode(X)
        p = check_poses(poses, len(z)).numpy()
        p = np.broadcast_to(p, (len(z), 3))
        return self.inverse_transform(np.concatenate([z, p], axis=1))

    def finetune(self, image, steps=None, lr=None):
        """Per-image adaptation; returns a :class:`~hourglass.training.FinetuneResult`."""
        check_is_fitted(self, "decoder_")
        ft = copy.deepcopy(self.config_.finetune)
        ft.steps = steps if steps is not None else ft.steps
        ft.lr = lr if lr is not None else ft.lr
        target = check_images(image, self.resolution)[:1]
        return finetune_image(self.decoder_, self.encoder_, self.discriminator_, target, ft,
                              make_extractor(self.config_), self.config_.weights_for(2))

    @torch.no_grad()
    def score(self, X, y=None):
        """Negative mean byte-scale L1 of the encode/decode reconstruction (higher is better)."""
        x = check_images(X, self.resolution)
        check_is_fitted(self, "decoder_")
        recon = self.decoder_(*self.encoder_(x))
        return -float(metric_l1_255(recon, x).mean())
