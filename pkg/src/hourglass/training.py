"""Stage 1 / Stage 2 training, per-image finetuning and latent-fitting baselines."""
from __future__ import annotations

import copy
import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn

from . import losses as L
from .config import FinetuneConfig, FitConfig, LossWeights, ModelConfig, TrainConfig
from .datasets import DatasetSplit, iter_training_batches
from .exceptions import NumericalAbort
from .geometry import PoseRange, pose_tensor_to_unit, sample_poses, unit_to_pose_tensor
from .models import build_networks, freeze, sample_latent

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "stage", "epoch") + L.LossReport.COMPONENTS + ("l_adv_d", "total")


def lr_schedule(epoch: float, cfg: TrainConfig) -> float:
    """Constant until ``decay_start_epoch``, then linear down to zero at ``epochs``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if epoch <= cfg.decay_start_epoch or cfg.epochs <= cfg.decay_start_epoch:
        return cfg.lr
    remaining = max(cfg.epochs - epoch, 0.0)
    return cfg.lr * remaining / (cfg.epochs - cfg.decay_start_epoch)


def _adam(params, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def state_checksum(module: nn.Module) -> str:
    """SHA-256 over the raw bytes of every tensor in the state dict."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class TrainState:
    """Everything the training loop mutates.

    ``teacher`` is the frozen Stage-1 decoder during Stage 2 and ``None``
    otherwise.
    """

    decoder: nn.Module
    encoder: nn.Module
    discriminator: nn.Module
    opt_decoder: torch.optim.Optimizer
    opt_encoder: torch.optim.Optimizer
    opt_disc: torch.optim.Optimizer
    rng: torch.Generator
    pose_range: PoseRange
    stage: int = 1
    epoch: int = 0
    step: int = 0
    teacher: Optional[nn.Module] = None
    history: list = field(default_factory=list)

    @property
    def latent_dim(self) -> int:
        return self.decoder.latent_dim

    def optimizers(self):
        return self.opt_decoder, self.opt_encoder, self.opt_disc

    def sample(self, n: int):
        z = sample_latent(self.rng, n, self.latent_dim)
        return z, sample_poses(self.rng, n, self.pose_range)


def init_state(model_cfg: ModelConfig, train_cfg: TrainConfig, pose_range: PoseRange, seed: int,
               networks=None) -> TrainState:
    """Fresh Stage-1 state; ``networks`` overrides the default decoder/encoder/discriminator."""
    decoder, encoder, disc = networks if networks is not None else build_networks(model_cfg, pose_range, seed)
    rng = torch.Generator().manual_seed(seed * 1000 + train_cfg.stage)
    return TrainState(decoder, encoder, disc, _adam(decoder.parameters(), train_cfg),
                      _adam(encoder.parameters(), train_cfg), _adam(disc.parameters(), train_cfg),
                      rng, pose_range, stage=train_cfg.stage)


def begin_stage2(state: TrainState, train_cfg: TrainConfig, seed: int) -> TrainState:
    """Stage-2 state warm-started from a Stage-1 state.

    Decoder, encoder and discriminator keep their weights; the teacher is a
    frozen deep copy of the decoder. Optimisers restart.
    """
    teacher = freeze(copy.deepcopy(state.decoder)).eval()
    rng = torch.Generator().manual_seed(seed * 1000 + 2)
    return TrainState(state.decoder, state.encoder, state.discriminator,
                      _adam(state.decoder.parameters(), train_cfg), _adam(state.encoder.parameters(), train_cfg),
                      _adam(state.discriminator.parameters(), train_cfg), rng, state.pose_range,
                      stage=2, teacher=teacher)


def _check_finite(report: L.LossReport, state: TrainState):
    if not report.is_finite():
        snapshot = {
            "decoder": copy.deepcopy(state.decoder.state_dict()),
            "encoder": copy.deepcopy(state.encoder.state_dict()),
            "discriminator": copy.deepcopy(state.discriminator.state_dict()),
            "report": report.as_dict(),
            "step": state.step,
        }
        raise NumericalAbort(f"non-finite loss at stage {state.stage} step {state.step}: {report.as_dict()}",
                             snapshot)


def discriminator_update(state: TrainState, real: torch.Tensor, fake: torch.Tensor) -> float:
    state.opt_disc.zero_grad(set_to_none=True)
    d_loss = L.discriminator_loss(state.discriminator(real), state.discriminator(fake.detach()))
    d_loss.backward()
    state.opt_disc.step()
    return d_loss.item()


def encoder_consistency_loss(encoder, images, z, poses, pose_range, weights: LossWeights):
    """Weighted L_z + L_theta of the encoder on images rendered from known (z, pose)."""
    z_hat, poses_hat = encoder(images)
    l_z = L.latent_consistency(z, z_hat)
    l_theta = L.pose_consistency(poses, poses_hat, pose_range)
    return weights.z * l_z + weights.theta * l_theta, {"l_z": l_z, "l_theta": l_theta}


def encoder_consistency_update(state: TrainState, images, z, poses, weights: LossWeights) -> dict:
    """One encoder step on generated images; the decoder only acts as a data source."""
    state.opt_encoder.zero_grad(set_to_none=True)
    loss, parts = encoder_consistency_loss(state.encoder, images.detach(), z, poses, state.pose_range, weights)
    loss.backward()
    state.opt_encoder.step()
    return {k: v.item() for k, v in parts.items()}


def stage1_step(state: TrainState, real: torch.Tensor, weights: LossWeights) -> L.LossReport:
    """Adversarial generator/discriminator update followed by the encoder inversion update."""
    state.decoder.train()
    z, poses = state.sample(real.shape[0])
    fake = state.decoder(z, poses)

    l_adv_d = discriminator_update(state, real, fake)

    state.opt_decoder.zero_grad(set_to_none=True)
    l_adv_g = L.generator_loss(state.discriminator(fake))
    if weights.adv > 0:
        (weights.adv * l_adv_g).backward()
        state.opt_decoder.step()
    state.opt_disc.zero_grad(set_to_none=True)

    parts = encoder_consistency_update(state, fake, z, poses, weights)
    report = L.make_report({**parts, "l_adv_g": l_adv_g.item()}, weights, l_adv_d)
    state.step += 1
    _check_finite(report, state)
    return report


def stage2_step(state: TrainState, real: torch.Tensor, weights: LossWeights, extractor,
                cfg: TrainConfig) -> L.LossReport:
    """Reconstruction of real images plus self-distillation from the frozen teacher.

    Term 1 reconstructs ``real`` through encoder and decoder (with the
    adversarial generator term). Term 2 trains the encoder to invert teacher
    renders. Term 3 renders a second view of each teacher sample, encodes it
    and asks the student decoder to reproduce the first view.
    """
    if state.teacher is None:
        raise RuntimeError("stage 2 needs the frozen stage-1 decoder")
    state.decoder.train()
    state.encoder.train()
    comps = {}
    total = 0.0
    l_adv_d = 0.0

    if cfg.use_reconstruction:
        z_s, pose_s = state.encoder(real)
        recon = state.decoder(z_s, pose_s)
        rec = L.reconstruction_losses(extractor, real, recon)
        comps.update(rec)
        total = total + L.weighted_total(rec, weights)
        if cfg.use_adversarial:
            l_adv_d = discriminator_update(state, real, recon)
            g = L.generator_loss(state.discriminator(recon))
            comps["l_adv_g"] = g
            total = total + weights.adv * g

    if cfg.use_consistency or cfg.use_distillation:
        n = real.shape[0] * max(cfg.distillation_ratio, 1)
        z_rand, pose_rand = state.sample(n)
        with torch.no_grad():
            target = state.teacher(z_rand, pose_rand)
        if cfg.use_consistency:
            loss, parts = encoder_consistency_loss(state.encoder, target, z_rand, pose_rand,
                                                   state.pose_range, weights)
            comps.update(parts)
            total = total + loss
        if cfg.use_distillation:
            if cfg.use_multiview:
                pose_src = sample_poses(state.rng, n, state.pose_range)
                with torch.no_grad():
                    source = state.teacher(z_rand, pose_src)
            else:
                source = target
            z_hat = state.encoder.latent(state.encoder.features(source))
            student = state.decoder(z_hat, pose_rand)
            dist = L.distillation_losses(extractor, target, student)
            comps.update(dist)
            total = total + L.weighted_total(dist, weights)

    state.opt_decoder.zero_grad(set_to_none=True)
    state.opt_encoder.zero_grad(set_to_none=True)
    if isinstance(total, torch.Tensor):
        total.backward()
        state.opt_decoder.step()
        state.opt_encoder.step()
    state.opt_disc.zero_grad(set_to_none=True)

    report = L.make_report({k: float(v.detach()) for k, v in comps.items()}, weights, l_adv_d)
    state.step += 1
    _check_finite(report, state)
    return report


class LossLog:
    """Append-only CSV of per-step loss reports."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        new = not self.path.exists()
        self._fh = open(self.path, "a", newline="")
        self._writer = csv.writer(self._fh)
        if new:
            self._writer.writerow(LOG_FIELDS)

    def write(self, step, stage, epoch, report: L.LossReport):
        d = report.as_dict()
        self._writer.writerow([step, stage, epoch] + [repr(d[k]) for k in LOG_FIELDS[3:]])

    def close(self):
        self._fh.close()


def train_stage(state: TrainState, split: DatasetSplit, cfg: TrainConfig, weights: LossWeights, seed: int,
                extractor=None, log_path=None,
                on_epoch_end: Optional[Callable[[TrainState], None]] = None) -> TrainState:
    """Run epochs ``state.epoch .. cfg.epochs - 1`` of the stage given by ``state.stage``."""
    if state.stage == 2 and extractor is None:
        raise ValueError("stage 2 needs a perceptual extractor")
    logger = LossLog(log_path) if log_path else None
    try:
        while state.epoch < cfg.epochs:
            lr = lr_schedule(state.epoch, cfg)
            for opt in state.optimizers():
                _set_lr(opt, lr)
            for i, batch in enumerate(iter_training_batches(split, cfg.batch_size, seed, state.epoch)):
                if cfg.max_steps_per_epoch is not None and i >= cfg.max_steps_per_epoch:
                    break
                if state.stage == 1:
                    report = stage1_step(state, batch, weights)
                else:
                    report = stage2_step(state, batch, weights, extractor, cfg)
                state.history.append(report)
                if logger:
                    logger.write(state.step, state.stage, state.epoch, report)
            last = state.history[-1] if state.history else None
            log.info("stage %d epoch %d done (lr %.2e) %s", state.stage, state.epoch, lr,
                     last.as_dict() if last else {})
            state.epoch += 1
            if on_epoch_end is not None:
                on_epoch_end(state)
    finally:
        if logger:
            logger.close()
    return state


# ---------------------------------------------------------------------------
# per-image procedures


def per_image_reconstruction(extractor, target, output) -> torch.Tensor:
    """``L_2 + L_ssim + L_vgg`` per image, shape ``(N,)``."""
    l2 = (target - output).square().mean(dim=(1, 2, 3))
    lssim = 1.0 - L.ssim(target, output, per_image=True)
    lvgg = 0.0
    for fa, fb in zip(extractor(target), extractor(output)):
        lvgg = lvgg + (fa - fb).square().mean(dim=(1, 2, 3))
    return l2 + lssim + lvgg


def l1_255(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-image mean absolute error on the byte scale."""
    return (a - b).abs().mean(dim=(1, 2, 3)) * 127.5


@dataclass
class FinetuneResult:
    decoder: nn.Module
    z: torch.Tensor
    pose: torch.Tensor
    trace: np.ndarray      # total loss before each step
    l1_trace: np.ndarray   # byte-scale L1 before each step
    initial_l1: float
    final_l1: float


def _wrap_unit(unit: torch.Tensor, pose_range: PoseRange) -> torch.Tensor:
    with torch.no_grad():
        if pose_range.full_circle:
            unit[:, 0].remainder_(1.0)
        unit.clamp_(0.0, 1.0)
    return unit


def finetune_image(decoder, encoder, discriminator, target: torch.Tensor, cfg: FinetuneConfig,
                   extractor, weights: Optional[LossWeights] = None) -> FinetuneResult:
    """Adapt a copy of the decoder plus ``(z, pose)`` to a single image.

    ``(z, pose)`` start from the encoder's estimate. The discriminator is
    held fixed and only contributes the generator term.
    """
    if cfg.steps < 1:
        raise ValueError("finetuning needs at least one step")
    weights = weights or LossWeights()
    pose_range = encoder.pose_range
    decoder = copy.deepcopy(decoder)
    decoder.train()
    for p in decoder.parameters():
        p.requires_grad_(cfg.optimize_decoder)
    with torch.no_grad():
        z0, pose0 = encoder(target)
    z = z0.clone().requires_grad_(cfg.optimize_latent)
    unit = pose_tensor_to_unit(pose0, pose_range).clone().requires_grad_(cfg.optimize_latent)
    params = []
    if cfg.optimize_decoder:
        params += list(decoder.parameters())
    if cfg.optimize_latent:
        params += [z, unit]
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=(0.5, 0.999))
    disc_params = [p.requires_grad for p in discriminator.parameters()]
    for p in discriminator.parameters():
        p.requires_grad_(False)
    trace, l1s = [], []
    try:
        for _ in range(cfg.steps):
            opt.zero_grad(set_to_none=True)
            out = decoder(z, unit_to_pose_tensor(unit, pose_range))
            rec = L.reconstruction_losses(extractor, target, out)
            loss = L.weighted_total(rec, weights)
            if cfg.use_adversarial and weights.adv > 0:
                loss = loss + weights.adv * L.generator_loss(discriminator(out))
            trace.append(loss.item())
            l1s.append(l1_255(target, out.detach()).mean().item())
            loss.backward()
            opt.step()
            _wrap_unit(unit, pose_range)
    finally:
        for p, flag in zip(discriminator.parameters(), disc_params):
            p.requires_grad_(flag)
    with torch.no_grad():
        final = decoder(z, unit_to_pose_tensor(unit, pose_range))
    for p in decoder.parameters():
        p.requires_grad_(False)
    return FinetuneResult(decoder, z.detach(), unit_to_pose_tensor(unit.detach(), pose_range),
                          np.array(trace), np.array(l1s), l1s[0], float(l1_255(target, final).mean()))


@dataclass
class FitResult:
    z: torch.Tensor
    pose: torch.Tensor
    trace: np.ndarray  # (steps, N) per-image reconstruction loss before each step
    final_loss: np.ndarray
    reconstruction: torch.Tensor


def fit_latent_baseline(decoder, targets: torch.Tensor, cfg: FitConfig, extractor, init: str = "random",
                        encoder=None, rng: Optional[torch.Generator] = None) -> FitResult:
    """Optimise only ``(z, pose)`` of a frozen decoder to reproduce each target.

    ``init="random"`` draws the start from the sampling distributions;
    ``init="encoder"`` starts from the encoder's estimate. Images in a batch
    are fitted independently: the summed per-image losses share no
    parameters.
    """
    pose_range = decoder.pose_range
    n = targets.shape[0]
    if init == "random":
        rng = rng or torch.Generator().manual_seed(0)
        z0 = sample_latent(rng, n, decoder.latent_dim)
        unit0 = torch.rand(n, 3, generator=rng)
    elif init == "encoder":
        if encoder is None:
            raise ValueError("encoder initialisation needs an encoder")
        with torch.no_grad():
            z0, pose0 = encoder(targets)
        unit0 = pose_tensor_to_unit(pose0, pose_range)
    else:
        raise ValueError(f"unknown init {init!r}")
    z = z0.clone().requires_grad_(True)
    unit = unit0.clone().requires_grad_(True)
    grads = [p.requires_grad for p in decoder.parameters()]
    for p in decoder.parameters():
        p.requires_grad_(False)
    opt = torch.optim.Adam([z, unit], lr=cfg.lr)
    trace = []
    try:
        for _ in range(cfg.steps):
            opt.zero_grad(set_to_none=True)
            out = decoder(z, unit_to_pose_tensor(unit, pose_range))
            per = per_image_reconstruction(extractor, targets, out)
            trace.append(per.detach().numpy().copy())
            per.sum().backward()
            opt.step()
            _wrap_unit(unit, pose_range)
        with torch.no_grad():
            out = decoder(z, unit_to_pose_tensor(unit, pose_range))
            final = per_image_reconstruction(extractor, targets, out).numpy()
    finally:
        for p, flag in zip(decoder.parameters(), grads):
            p.requires_grad_(flag)
    return FitResult(z.detach(), unit_to_pose_tensor(unit.detach(), pose_range), np.array(trace), final, out)
