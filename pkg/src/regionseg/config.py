"""Configuration dataclasses for models, losses, augmentation, data and training.

Every knob that an experiment can vary lives here. Configs serialize to plain
dicts / JSON for run snapshots, and support dotted-path overrides
(``losses.beta2=0``) used by the CLI ``--set`` flag and the ablation harness.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


@dataclass
class LossWeights:
    """Weights, temperatures and constants for every objective.

    ``alpha`` balances supervised vs. unsupervised loss; ``beta1..beta4``
    weight the class-consistency, semantic-mask, mask-contrastive and
    feature-contrastive terms respectively. ``tau_m`` / ``tau_f`` are the
    contrastive temperatures, ``lambda_focal`` / ``lambda_dice`` the binary
    mask loss mixture.
    """

    alpha: float = 1.0
    beta1: float = 1.0
    beta2: float = 20.0
    beta3: float = 4.0
    beta4: float = 4.0
    lambda_focal: float = 20.0
    lambda_dice: float = 1.0
    tau_m: float = 1.0
    tau_f: float = 0.5
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    # classification weight for queries assigned to the no-object label
    no_object_weight: float = 0.1
    # region pooling: mask-average (divide by mask mass) or plain global
    # average over all positions
    pool_mode: str = "map"  # "map" | "gap"
    dice_loss_eps: float = 1.0
    dice_sim_eps: float = 1e-7
    pool_eps: float = 1e-6

    def validate(self) -> None:
        for name in ("alpha", "beta1", "beta2", "beta3", "beta4",
                     "lambda_focal", "lambda_dice"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.tau_m <= 0 or self.tau_f <= 0:
            raise ValueError("temperatures must be > 0")
        if self.pool_mode not in ("map", "gap"):
            raise ValueError("pool_mode must be 'map' or 'gap'")


@dataclass
class EmaConfig:
    """Teacher update: exponential moving average of student parameters."""

    decay: float = 0.99
    every: int = 1

    def validate(self) -> None:
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError("ema decay must lie in [0, 1]")
        if self.every < 1:
            raise ValueError("ema update interval must be >= 1")


@dataclass
class PseudoLabelConfig:
    """Filters applied when turning teacher predictions into pseudo segments."""

    confidence_threshold: float = 0.7
    mask_threshold: float = 0.5
    min_area: int = 4

    def validate(self) -> None:
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ValueError("confidence_threshold must lie in [0, 1]")
        if not 0.0 <= self.mask_threshold <= 1.0:
            raise ValueError("mask_threshold must lie in [0, 1]")
        if self.min_area < 0:
            raise ValueError("min_area must be >= 0")


@dataclass
class ArchConfig:
    """Toy mask-classification network dimensions."""

    in_channels: int = 3
    width: int = 64
    embed_dim: int = 64          # per-pixel feature / mask embedding dim C
    num_queries: int = 8         # N
    num_classes: int = 4         # K (class ids 1..K, background = 1)
    norm_groups: int = 8

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes (background + 1)")
        for name in ("in_channels", "width", "embed_dim", "num_queries"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.width % self.norm_groups != 0:
            raise ValueError("width must be divisible by norm_groups")


@dataclass
class AugmentConfig:
    """Weak/strong augmentation parameters.

    The strong view reuses the weak view's geometry and adds a CutMix patch
    plus a wider color-jitter range, so pseudo segments transport between the
    two views through an identity-plus-CutMix map.
    """

    scale_range: tuple[float, float] = (1.0, 1.25)
    crop_hw: tuple[int, int] = (64, 64)
    hflip_prob: float = 0.5
    weak_jitter: tuple[float, float] = (0.9, 1.1)
    strong_jitter: tuple[float, float] = (0.6, 1.4)
    cutmix_area: tuple[float, float] = (0.2, 0.5)
    cutmix_aspect: tuple[float, float] = (0.5, 2.0)

    def validate(self) -> None:
        if self.scale_range[0] > self.scale_range[1] or self.scale_range[0] <= 0:
            raise ValueError("bad scale_range")
        if self.crop_hw[0] % 4 or self.crop_hw[1] % 4:
            raise ValueError("crop size must be divisible by 4")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must lie in [0, 1]")


@dataclass
class SceneConfig:
    """Synthetic scene generator parameters."""

    height: int = 64
    width: int = 64
    num_classes: int = 4         # background (1) plus num_classes-1 shape classes
    min_shapes: int = 1
    max_shapes: int = 3
    min_size: int = 6
    max_size: int = 14
    noise_sigma: float = 0.03

    def validate(self) -> None:
        if self.height % 4 or self.width % 4:
            raise ValueError("height and width must be divisible by 4")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.min_shapes < 0 or self.max_shapes < self.min_shapes:
            raise ValueError("bad shape-count range")
        if self.min_size < 2 or self.max_size < self.min_size:
            raise ValueError("bad size range")


@dataclass
class DatasetConfig:
    """On-disk dataset build parameters."""

    num_train: int = 512
    num_val: int = 64
    labeled_fraction: float = 0.125
    labeled_count: int | None = None   # overrides labeled_fraction when set
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)

    ALLOWED_FRACTIONS = (0.5, 0.25, 0.125, 0.0625)

    def validate(self) -> None:
        self.scene.validate()
        if self.num_train + self.num_val < 8:
            raise ValueError("total sample count must be >= 8")
        if self.labeled_count is None:
            if self.labeled_fraction not in self.ALLOWED_FRACTIONS:
                raise ValueError(
                    "labeled_fraction must be one of 1/2, 1/4, 1/8, 1/16 "
                    "(or pass labeled_count explicitly)")
        elif not 1 <= self.labeled_count <= self.num_train:
            raise ValueError("labeled_count out of range")

    def resolved_labeled_count(self) -> int:
        if self.labeled_count is not None:
            return self.labeled_count
        return int(round(self.num_train * self.labeled_fraction))


@dataclass
class TrainConfig:
    """Everything the training loop needs."""

    losses: LossWeights = field(default_factory=LossWeights)
    ema: EmaConfig = field(default_factory=EmaConfig)
    pseudo: PseudoLabelConfig = field(default_factory=PseudoLabelConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    lr: float = 1e-4
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    clip_grad_norm: float = 1.0  # max total gradient norm; 0 disables clipping
    max_iters: int = 2000
    labeled_batch: int = 4
    unlabeled_batch: int = 4
    ema_warmup: int = 100        # steps during which the teacher is re-copied
    unlabeled_warmup: int = 0    # steps before the unlabeled branch activates
    augment_labeled: bool = True
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 1000
    deterministic: bool = True   # single-threaded torch for replayable runs
    eval_model: str = "student"  # "student" | "teacher"
    debug_matching: bool = False

    # per-loss enable flags (ablation rows); a disabled loss contributes 0
    enable_rcc: bool = True
    enable_smc: bool = True
    enable_rmc: bool = True
    enable_rfc: bool = True

    def validate(self) -> None:
        self.losses.validate()
        self.ema.validate()
        self.pseudo.validate()
        self.arch.validate()
        self.augment.validate()
        if self.max_iters <= 0:
            raise ValueError("max_iters must be > 0")
        if self.poly_power <= 0:
            raise ValueError("poly_power must be > 0")
        if self.labeled_batch < 1:
            raise ValueError("labeled_batch must be >= 1")
        if self.unlabeled_batch < 0:
            raise ValueError("unlabeled_batch must be >= 0")
        if self.eval_model not in ("student", "teacher"):
            raise ValueError("eval_model must be 'student' or 'teacher'")

    def unlabeled_enabled(self) -> bool:
        """Whether the unlabeled branch can contribute anything at all."""
        any_loss = ((self.enable_rcc and self.losses.beta1 > 0)
                    or (self.enable_smc and self.losses.beta2 > 0)
                    or (self.enable_rmc and self.losses.beta3 > 0)
                    or (self.enable_rfc and self.losses.beta4 > 0))
        return self.losses.alpha > 0 and self.unlabeled_batch > 0 and any_loss


# Named presets. "desk" is the CPU-sized default; the large presets keep the
# full-scale schedule shapes (batch 16, 120K/160K iterations, 512/768 crops)
# for reference even though they are not runnable on a desktop.
def _desk() -> TrainConfig:
    return TrainConfig()


def _large(crop: int, iters: int, classes: int) -> TrainConfig:
    cfg = TrainConfig()
    cfg.arch = ArchConfig(num_queries=50, num_classes=classes)
    cfg.augment = AugmentConfig(crop_hw=(crop, crop))
    cfg.max_iters = iters
    cfg.labeled_batch = 8
    cfg.unlabeled_batch = 8
    return cfg


PRESETS = {
    "desk": _desk,
    "large-512": lambda: _large(512, 120_000, 21),
    "large-512-extended": lambda: _large(512, 160_000, 21),
    "large-768": lambda: _large(768, 120_000, 19),
}


# ---------------------------------------------------------------------------
# dict / JSON round-trips and dotted-path overrides

def to_dict(cfg: Any) -> Any:
    if dataclasses.is_dataclass(cfg) and not isinstance(cfg, type):
        return {f.name: to_dict(getattr(cfg, f.name))
                for f in dataclasses.fields(cfg)}
    if isinstance(cfg, tuple):
        return list(cfg)
    return cfg


def from_dict(cls: type, data: dict) -> Any:
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in fields:
            raise KeyError(f"unknown config field {cls.__name__}.{key}")
        f = fields[key]
        default = (f.default_factory() if f.default_factory is not dataclasses.MISSING
                   else f.default)
        if dataclasses.is_dataclass(default):
            kwargs[key] = from_dict(type(default), value)
        elif isinstance(default, tuple) and isinstance(value, (list, tuple)):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def save_json(cfg: Any, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")


def load_json(cls: type, path: str | Path) -> Any:
    return from_dict(cls, json.loads(Path(path).read_text()))


def _cast_like(current: Any, raw: str) -> Any:
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean from {raw!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        elem = current[0] if current else 0.0
        return tuple(type(elem)(p) for p in parts)
    if current is None:
        # optional ints (e.g. labeled_count)
        return None if raw.lower() == "none" else int(raw)
    return type(current)(raw)


def apply_override(cfg: Any, dotted: str, raw_value: str) -> None:
    """Set ``cfg.<dotted.path> = value`` parsed against the field's type."""
    parts = dotted.split(".")
    target = cfg
    for name in parts[:-1]:
        if not hasattr(target, name):
            raise KeyError(f"unknown config field {dotted!r}")
        target = getattr(target, name)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(target) or leaf not in {
            f.name for f in dataclasses.fields(target)}:
        raise KeyError(f"unknown config field {dotted!r}")
    setattr(target, leaf, _cast_like(getattr(target, leaf), raw_value))


def apply_overrides(cfg: Any, overrides: dict[str, str]) -> Any:
    for key, value in overrides.items():
        apply_override(cfg, key, value)
    return cfg
