"""Run configuration: nested dataclasses serialised as YAML sections."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .exceptions import ConfigError
from .geometry import POSE_RANGES, PoseRange


@dataclass
class DatasetConfig:
    name: str = "synthetic"
    path: Optional[str] = None
    pose_range: PoseRange = field(default_factory=lambda: POSE_RANGES["synthetic"])
    n_objects: int = 100
    views_per_object: int = 20


@dataclass
class ModelConfig:
    resolution: int = 32
    latent_dim: int = 128
    const_size: int = 4
    const_channels: int = 64
    n_3d_up: int = 1
    volume_channels: int = 32
    rotated_channels: int = 16
    projection_channels: int = 128
    channels_2d: int = 64
    mapping_hidden: int = 128
    encoder_channels: int = 32
    disc_channels: int = 32

    @property
    def volume_size(self) -> int:
        return self.const_size * 2 ** self.n_3d_up

    @property
    def n_2d_up(self) -> int:
        ratio = self.resolution // self.volume_size
        n = ratio.bit_length() - 1
        if ratio < 1 or 2 ** n != ratio or self.volume_size * ratio != self.resolution:
            raise ConfigError(
                f"resolution {self.resolution} must be a power-of-two multiple of volume size {self.volume_size}")
        return n


@dataclass
class LossWeights:
    z: float = 1.0
    theta: float = 1.0
    l2: float = 1.0
    vgg: float = 1.0
    ssim: float = 1.0
    adv: float = 1.0
    l2_gen: float = 1.0
    vgg_gen: float = 1.0
    ssim_gen: float = 1.0


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 50
    decay_start_epoch: int = 25
    lr: float = 5e-5
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 32
    # Stage-2 switches (ablation axes)
    use_reconstruction: bool = True
    use_distillation: bool = True
    use_multiview: bool = True
    use_adversarial: bool = True
    use_consistency: bool = True
    # number of distillation sub-steps per reconstruction step
    distillation_ratio: int = 1
    checkpoint_every: int = 1
    max_steps_per_epoch: Optional[int] = None
    # overrides the run-level loss weights for this stage
    loss_weights: Optional[LossWeights] = None


@dataclass
class FinetuneConfig:
    steps: int = 100
    lr: float = 1e-4
    optimize_decoder: bool = True
    optimize_latent: bool = True
    use_adversarial: bool = True


@dataclass
class FitConfig:
    """Latent-fitting baselines (frozen decoder)."""
    steps: int = 100
    lr: float = 1e-2


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: TrainConfig = field(default_factory=lambda: TrainConfig(stage=1, epochs=50))
    stage2: TrainConfig = field(default_factory=lambda: TrainConfig(stage=2, epochs=30))
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    perceptual: str = "random"
    seed: int = 0
    output_dir: str = "runs/default"

    def weights_for(self, stage: int) -> LossWeights:
        """Loss weights in effect for a stage; finetuning follows stage 2."""
        train_cfg = self.stage1 if stage == 1 else self.stage2
        return train_cfg.loss_weights or self.loss_weights


def desk_config(**overrides) -> RunConfig:
    """Small configuration that trains on one CPU core in minutes."""
    cfg = RunConfig()
    cfg.model.n_3d_up = 2  # an 8^3 volume collapses to a pose-invariant render at 32 px
    cfg.stage1 = TrainConfig(stage=1, epochs=24, decay_start_epoch=16, lr=2e-4, batch_size=16)
    cfg.stage2 = TrainConfig(stage=2, epochs=10, decay_start_epoch=6, lr=2e-4, batch_size=16)
    # with equal weights the generator term swamps reconstruction in stage 2
    cfg.stage2.loss_weights = LossWeights(adv=0.1)
    cfg.output_dir = "runs/desk"
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


def to_dict(cfg) -> dict:
    out = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            value = value.to_dict() if isinstance(value, PoseRange) else to_dict(value)
        out[f.name] = value
    return out


def _build(cls, data):
    if not isinstance(data, dict):
        raise ConfigError(f"section for {cls.__name__} must be a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    hints = {"dataset": DatasetConfig, "model": ModelConfig, "stage1": TrainConfig,
             "stage2": TrainConfig, "finetune": FinetuneConfig, "fit": FitConfig,
             "loss_weights": LossWeights}
    for name, value in data.items():
        if name == "pose_range":
            value = PoseRange(**value)
        elif cls is RunConfig and name in hints:
            value = _build(hints[name], value)
        elif cls is TrainConfig and name == "loss_weights" and value is not None:
            value = _build(LossWeights, value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data)


def dumps(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def loads(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return from_dict(data)


def load(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return loads(path.read_text())


def save(cfg: RunConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dumps(cfg))
