"""Versioned checkpoints: a JSON manifest plus one torch blob per checkpoint directory.

Layout::

    <dir>/manifest.json   format version, config snapshot, stage, epoch, step,
                          metric summary, parameter shapes, checksums
    <dir>/state.pt        state dicts of decoder, encoder, discriminator
                          (and teacher during Stage 2), optimiser moments,
                          sampling RNG state
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import torch

from . import config as C
from .exceptions import ConfigError, DataError
from .models import build_networks, freeze
from .training import TrainState, _adam, state_checksum

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "state.pt"
NETWORKS = ("decoder", "encoder", "discriminator")


def _shapes(module) -> dict:
    return {k: list(v.shape) for k, v in module.state_dict().items()}


def save_checkpoint(path, state: TrainState, cfg: C.RunConfig, metrics: Optional[dict] = None) -> Path:
    """Write ``state`` under directory ``path``; returns the directory."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    nets = {name: getattr(state, name) for name in NETWORKS}
    if state.teacher is not None:
        nets["teacher"] = state.teacher
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": C.to_dict(cfg),
        "stage": state.stage,
        "epoch": state.epoch,
        "step": state.step,
        "metrics": metrics or {},
        "shapes": {name: _shapes(m) for name, m in nets.items()},
        "checksums": {name: state_checksum(m) for name, m in nets.items()},
    }
    blob = {
        "networks": {name: m.state_dict() for name, m in nets.items()},
        "optimizers": {
            "decoder": state.opt_decoder.state_dict(),
            "encoder": state.opt_encoder.state_dict(),
            "discriminator": state.opt_disc.state_dict(),
        },
        "rng": state.rng.get_state(),
    }
    torch.save(blob, path / BLOB)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    file = path / MANIFEST if path.is_dir() else path
    if not file.exists():
        raise DataError(f"no checkpoint manifest at {file}")
    try:
        manifest = json.loads(file.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt checkpoint manifest {file}: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint format version {version!r} (expected {FORMAT_VERSION})")
    return manifest


def _validate_shapes(name, module, expected):
    have = _shapes(module)
    if have != expected:
        bad = sorted(k for k in set(have) | set(expected) if have.get(k) != expected.get(k))
        raise DataError(f"{name} parameters do not match the checkpoint manifest: {bad[:5]}")


def load_checkpoint(path, cfg: Optional[C.RunConfig] = None) -> tuple[TrainState, C.RunConfig, dict]:
    """Rebuild the training state saved by :func:`save_checkpoint`.

    The networks are built from ``cfg`` (default: the config snapshot in the
    manifest) and their shapes checked against the manifest before any
    weights are copied.
    """
    path = Path(path)
    manifest = read_manifest(path)
    saved_cfg = C.from_dict(manifest["config"])
    cfg = cfg or saved_cfg
    stage = manifest["stage"]
    train_cfg = cfg.stage1 if stage == 1 else cfg.stage2
    pose_range = cfg.dataset.pose_range
    decoder, encoder, disc = build_networks(cfg.model, pose_range, cfg.seed)
    nets = {"decoder": decoder, "encoder": encoder, "discriminator": disc}
    if "teacher" in manifest["shapes"]:
        nets["teacher"] = build_networks(cfg.model, pose_range, cfg.seed)[0]
    for name, module in nets.items():
        if name not in manifest["shapes"]:
            raise DataError(f"checkpoint has no {name}")
        _validate_shapes(name, module, manifest["shapes"][name])

    blob_path = path / BLOB
    if not blob_path.exists():
        raise DataError(f"missing checkpoint blob {blob_path}")
    blob = torch.load(blob_path, map_location="cpu", weights_only=True)
    for name, module in nets.items():
        module.load_state_dict(blob["networks"][name])
    teacher = nets.get("teacher")
    if teacher is not None:
        freeze(teacher).eval()

    opts = [_adam(m.parameters(), train_cfg) for m in (decoder, encoder, disc)]
    for opt, key in zip(opts, NETWORKS):
        opt.load_state_dict(blob["optimizers"][key])
    rng = torch.Generator()
    rng.set_state(blob["rng"])
    state = TrainState(decoder, encoder, disc, *opts, rng, pose_range, stage=stage,
                       epoch=manifest["epoch"], step=manifest["step"], teacher=teacher)
    return state, cfg, manifest


def checkpoint_checksums(path) -> dict:
    """Checksums recorded in the manifest (used for determinism checks)."""
    return read_manifest(path)["checksums"]


def require_stage(manifest: dict, stage: int):
    if manifest["stage"] < stage:
        raise ConfigError(f"checkpoint is from stage {manifest['stage']}, stage {stage} or later required")
