"""Run orchestration shared by the command line and the estimator wrapper."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional

from . import checkpoint as ckpt
from .config import RunConfig
from .datasets import load_split, make_synthetic_dataset, read_manifest
from .exceptions import ConfigError, DataError
from .losses import PerceptualExtractor
from .training import begin_stage2, init_state, train_stage

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


def load_dataset(cfg: RunConfig) -> dict:
    """Splits named by ``cfg.dataset``: a manifest on disk, or synthetic cuboids in memory."""
    ds = cfg.dataset
    res = cfg.model.resolution
    if ds.path:
        present = {r["split"] for r in read_manifest(ds.path)}
        out = {name: load_split(ds.path, name, res, ds.name) for name in SPLITS if name in present}
        if "train" not in out:
            raise DataError(f"manifest {ds.path} has no training split")
        return out
    if ds.name != "synthetic":
        raise ConfigError(f"dataset {ds.name!r} needs a manifest path")
    return make_synthetic_dataset(ds.n_objects, ds.views_per_object, ds.pose_range, cfg.seed, res)


def make_extractor(cfg: RunConfig) -> PerceptualExtractor:
    return PerceptualExtractor(mode=cfg.perceptual)


def stage_dir(out_dir, stage: int) -> Path:
    return Path(out_dir) / f"stage{stage}"


def _saver(cfg: RunConfig, out: Path, every: int):
    def on_epoch_end(state):
        last = state.history[-1].as_dict() if state.history else {}
        if every > 0 and state.epoch % every == 0:
            ckpt.save_checkpoint(out / f"epoch_{state.epoch:03d}", state, cfg, last)
        ckpt.save_checkpoint(out / "last", state, cfg, last)
    return on_epoch_end


def train(cfg: RunConfig, stage: int, splits: Optional[dict] = None, out_dir=None,
          resume=None, init_from=None, extractor=None):
    """Train one stage and write checkpoints plus a loss CSV under ``out_dir/stage<k>``.

    Stage 1 starts fresh unless ``resume`` names a checkpoint. Stage 2 needs
    either ``resume`` (a Stage-2 checkpoint) or ``init_from`` (a Stage-1
    checkpoint); it refuses to start from scratch.
    """
    if stage not in (1, 2):
        raise ConfigError(f"stage must be 1 or 2, got {stage}")
    out_dir = Path(out_dir or cfg.output_dir)
    splits = splits if splits is not None else load_dataset(cfg)
    train_cfg = cfg.stage1 if stage == 1 else cfg.stage2
    pose_range = cfg.dataset.pose_range

    if resume is not None:
        state, _, manifest = ckpt.load_checkpoint(resume, cfg)
        if manifest["stage"] != stage:
            raise ConfigError(f"cannot resume stage {stage} from a stage-{manifest['stage']} checkpoint")
    elif stage == 1:
        state = init_state(cfg.model, train_cfg, pose_range, cfg.seed)
    else:
        if init_from is None or not (Path(init_from) / ckpt.MANIFEST).exists():
            raise ConfigError("stage 2 starts from the stage-1 decoder and encoder; "
                              "pass a stage-1 checkpoint (none found)")
        s1, _, manifest = ckpt.load_checkpoint(init_from, cfg)
        if manifest["stage"] != 1:
            raise ConfigError(f"{init_from} is not a stage-1 checkpoint")
        state = begin_stage2(s1, train_cfg, cfg.seed)

    if stage == 2 and extractor is None:
        extractor = make_extractor(cfg)
    out = stage_dir(out_dir, stage)
    out.mkdir(parents=True, exist_ok=True)
    train_stage(state, splits["train"], train_cfg, cfg.weights_for(stage), cfg.seed, extractor=extractor,
                log_path=out / "losses.csv", on_epoch_end=_saver(cfg, out, train_cfg.checkpoint_every))
    if state.epoch == 0 or not (out / "last" / ckpt.MANIFEST).exists():
        ckpt.save_checkpoint(out / "last", state, cfg)
    return state
