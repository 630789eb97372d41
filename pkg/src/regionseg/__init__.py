"""Region-level contrastive and consistency learning for semi-supervised
semantic segmentation, at desk scale."""

from .config import (ArchConfig, AugmentConfig, DatasetConfig, EmaConfig,
                     LossWeights, PseudoLabelConfig, SceneConfig, TrainConfig)
from .data import (DatasetManifest, Segment, SegmentSet, build_dataset,
                   generate_scene, load_manifest, load_sample)
from .augment import (TransformRecord, strong_augment, transport_segments,
                      weak_augment)
from .model import (PredictionSet, RegionModel, forward, init_params,
                    load_checkpoint, save_checkpoint)
from .matching import Assignment, CostMatrix, build_cost_matrix, hungarian
from .losses import (class_union, dice_similarity, mask_loss, rcc_loss,
                     region_pool, rfc_loss, rmc_loss, smc_loss,
                     supervised_loss, total_loss, unlabeled_loss)
from .semi import ema_update, generate_pseudo_labels, unlabeled_step
from .trainer import RunReport, ablation, poly_lr, train
from .evaluation import miou, semantic_inference
from .estimator import RegionSegmenter

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "AugmentConfig", "DatasetConfig", "EmaConfig",
    "LossWeights", "PseudoLabelConfig", "SceneConfig", "TrainConfig",
    "DatasetManifest", "Segment", "SegmentSet", "build_dataset",
    "generate_scene", "load_manifest", "load_sample",
    "TransformRecord", "strong_augment", "transport_segments", "weak_augment",
    "PredictionSet", "RegionModel", "forward", "init_params",
    "load_checkpoint", "save_checkpoint",
    "Assignment", "CostMatrix", "build_cost_matrix", "hungarian",
    "class_union", "dice_similarity", "mask_loss", "rcc_loss", "region_pool",
    "rfc_loss", "rmc_loss", "smc_loss", "supervised_loss", "total_loss",
    "unlabeled_loss",
    "ema_update", "generate_pseudo_labels", "unlabeled_step",
    "RunReport", "ablation", "poly_lr", "train",
    "miou", "semantic_inference",
    "RegionSegmenter",
]
