"""Semantic inference from region predictions and mIoU computation."""
from __future__ import annotations

import numpy as np

from .model import PredictionSet
from .validation import check_label_map


def semantic_inference(preds: PredictionSet) -> np.ndarray:
    """Per-pixel class map from probability-weighted soft masks.

    Pixel class = argmax over real classes c of sum_i p_i(c) * m_i[pixel];
    the no-object column is excluded and ties go to the lowest class id.
    """
    probs = preds.class_probs.detach().cpu().numpy().astype(np.float64)
    masks = preds.soft_masks.detach().cpu().numpy().astype(np.float64)
    k = preds.num_classes
    scores = np.einsum("nk,nhw->khw", probs[:, :k], masks)
    return (np.argmax(scores, axis=0) + 1).astype(np.int64)


def confusion_matrix(pred_maps: list[np.ndarray], gt_maps: list[np.ndarray],
                     num_classes: int) -> np.ndarray:
    """Aggregate K x K confusion counts (rows = ground truth, cols = pred)."""
    if len(pred_maps) != len(gt_maps):
        raise ValueError("prediction and ground-truth lists differ in length")
    k = num_classes
    counts = np.zeros((k, k), dtype=np.int64)
    for pred, gt in zip(pred_maps, gt_maps):
        pred = check_label_map(pred, k, "prediction")
        gt = check_label_map(gt, k, "ground truth")
        if pred.shape != gt.shape:
            raise ValueError("prediction and ground-truth shapes differ")
        idx = (gt.ravel() - 1) * k + (pred.ravel() - 1)
        counts += np.bincount(idx, minlength=k * k).reshape(k, k)
    return counts


def miou_from_confusion(counts: np.ndarray,
                        exclude: tuple[int, ...] = ()
                        ) -> tuple[float, list[float]]:
    k = counts.shape[0]
    inter = np.diag(counts).astype(np.float64)
    union = counts.sum(axis=0) + counts.sum(axis=1) - np.diag(counts)
    per_class: list[float] = []
    included = []
    for c in range(k):
        if counts[c].sum() == 0:  # class absent from ground truth
            per_class.append(float("nan"))
            continue
        iou = float(inter[c] / union[c]) if union[c] > 0 else float("nan")
        per_class.append(iou)
        if (c + 1) not in exclude and np.isfinite(iou):
            included.append(iou)
    mean = float(np.mean(included)) if included else float("nan")
    return mean, per_class


def miou(pred_maps: list[np.ndarray], gt_maps: list[np.ndarray],
         num_classes: int, exclude: tuple[int, ...] = ()
         ) -> tuple[float, list[float]]:
    """Mean IoU over classes present in the ground truth, from one global
    confusion matrix aggregated over all images."""
    counts = confusion_matrix(pred_maps, gt_maps, num_classes)
    return miou_from_confusion(counts, exclude)
