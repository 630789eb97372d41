"""Scikit-learn style estimator facade over the training loop.

``RegionSegmenter`` exposes the semi-supervised segmenter through the
familiar ``fit`` / ``predict`` / ``score`` surface so it composes with
pipelines, ``clone`` and grid-search tooling. Unlabeled samples follow the
scikit-learn semi-supervised convention: pass ``None`` (or ``-1``) as their
target.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .config import TrainConfig
from .data import SegmentSet, label_map_to_segments
from .evaluation import miou, semantic_inference
from .model import forward
from .trainer import Sample, train_on_samples
from .validation import check_image, check_label_map


class RegionSegmenter(BaseEstimator):
    """Semi-supervised semantic segmenter trained with region-level
    contrastive and consistency objectives.

    Parameters
    ----------
    num_classes : int
        Number of semantic classes K (class ids 1..K, background = 1).
    num_queries : int
        Number of region queries N.
    alpha : float
        Weight of the unsupervised loss against the supervised loss.
    beta1, beta2, beta3, beta4 : float
        Weights of the class-consistency, semantic-mask-consistency,
        mask-contrastive and feature-contrastive losses.
    tau_m, tau_f : float
        Contrastive temperatures for mask and feature similarities.
    ema_decay : float
        Teacher exponential-moving-average decay rate.
    confidence_threshold : float
        Minimum teacher confidence for a pseudo region to survive.
    lr, weight_decay, max_iters, labeled_batch, unlabeled_batch, seed
        Optimization knobs, mirroring :class:`TrainConfig`.

    Attributes
    ----------
    student_ : RegionModel
        The trained student network.
    teacher_ : RegionModel
        The EMA teacher network.
    report_ : RunReport
        Training report (loss means, wall-clock, checkpoint paths).
    """

    def __init__(self, num_classes: int = 4, num_queries: int = 8,
                 width: int = 64, embed_dim: int = 64, alpha: float = 1.0,
                 beta1: float = 1.0, beta2: float = 20.0, beta3: float = 4.0,
                 beta4: float = 4.0, tau_m: float = 1.0, tau_f: float = 0.5,
                 ema_decay: float = 0.99, confidence_threshold: float = 0.7,
                 lr: float = 1e-4, weight_decay: float = 1e-4,
                 max_iters: int = 2000, labeled_batch: int = 4,
                 unlabeled_batch: int = 4, seed: int = 0,
                 deterministic: bool = True):
        self.num_classes = num_classes
        self.num_queries = num_queries
        self.width = width
        self.embed_dim = embed_dim
        self.alpha = alpha
        self.beta1 = beta1
        self.beta2 = beta2
        self.beta3 = beta3
        self.beta4 = beta4
        self.tau_m = tau_m
        self.tau_f = tau_f
        self.ema_decay = ema_decay
        self.confidence_threshold = confidence_threshold
        self.lr = lr
        self.weight_decay = weight_decay
        self.max_iters = max_iters
        self.labeled_batch = labeled_batch
        self.unlabeled_batch = unlabeled_batch
        self.seed = seed
        self.deterministic = deterministic

    def _config(self, crop_hw: tuple[int, int]) -> TrainConfig:
        cfg = TrainConfig()
        cfg.arch.num_classes = self.num_classes
        cfg.arch.num_queries = self.num_queries
        cfg.arch.width = self.width
        cfg.arch.embed_dim = self.embed_dim
        cfg.losses.alpha = self.alpha
        cfg.losses.beta1 = self.beta1
        cfg.losses.beta2 = self.beta2
        cfg.losses.beta3 = self.beta3
        cfg.losses.beta4 = self.beta4
        cfg.losses.tau_m = self.tau_m
        cfg.losses.tau_f = self.tau_f
        cfg.ema.decay = self.ema_decay
        cfg.pseudo.confidence_threshold = self.confidence_threshold
        cfg.lr = self.lr
        cfg.weight_decay = self.weight_decay
        cfg.max_iters = self.max_iters
        cfg.labeled_batch = self.labeled_batch
        cfg.unlabeled_batch = self.unlabeled_batch
        cfg.seed = self.seed
        cfg.deterministic = self.deterministic
        cfg.augment.crop_hw = crop_hw
        cfg.validate()
        return cfg

    @staticmethod
    def _as_segments(target, shape) -> SegmentSet | None:
        if target is None:
            return None
        if isinstance(target, SegmentSet):
            target.validate(shape)
            return target
        arr = np.asarray(target)
        if arr.ndim == 0 and int(arr) == -1:  # sklearn unlabeled marker
            return None
        return label_map_to_segments(check_label_map(arr.astype(np.int64)))

    def fit(self, X, y) -> "RegionSegmenter":
        """Train on images ``X`` with per-sample targets ``y``.

        ``X`` is array-like of shape (n, 3, H, W) with values in [0, 1];
        each ``y[i]`` is a :class:`SegmentSet`, an integer label map, or
        ``None`` / ``-1`` for unlabeled samples.
        """
        images = [check_image(x) for x in X]
        if len(images) != len(y):
            raise ValueError("X and y must have the same length")
        if not images:
            raise ValueError("cannot fit on an empty dataset")
        h, w = images[0].shape[1], images[0].shape[2]
        labeled, unlabeled = [], []
        for i, (image, target) in enumerate(zip(images, y)):
            segs = self._as_segments(target, (image.shape[1], image.shape[2]))
            sample = Sample(f"x{i:04d}", image, segs)
            (labeled if segs is not None else unlabeled).append(sample)
        if not labeled:
            raise ValueError("fit needs at least one labeled sample")
        cfg = self._config((h, w))
        report = train_on_samples(cfg, labeled, unlabeled, val=[], run_dir=None)
        self.config_ = cfg
        self.report_ = report
        self.student_ = report.student
        self.teacher_ = report.teacher
        return self

    def _require_fitted(self):
        if not hasattr(self, "config_"):
            raise NotFittedError("this RegionSegmenter has not been fitted")

    def predict(self, X) -> np.ndarray:
        """Per-pixel class maps of shape (n, H, W), values in 1..K."""
        self._require_fitted()
        self.student_.eval()
        out = []
        with torch.no_grad():
            for x in X:
                image = check_image(x)
                out.append(semantic_inference(forward(image, self.student_)))
        return np.stack(out)

    def score(self, X, y) -> float:
        """Mean IoU of predictions against label maps / segment sets."""
        preds = list(self.predict(X))
        gts = []
        for target, x in zip(y, X):
            segs = self._as_segments(target, np.asarray(x).shape[1:])
            if segs is None:
                raise ValueError("score requires labels for every sample")
            gts.append(segs.to_label_map())
        mean, _ = miou(preds, gts, self.num_classes)
        return mean
