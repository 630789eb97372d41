"""Differentiable objectives.

Supervised set loss over matched (class, mask) pairs; region-level
contrastive losses over mask overlaps (RMC) and pooled region features
(RFC); region-level consistency losses over matched classes (RCC) and
class-wise mask unions (SMC); and the weighted compositions that combine
them.

Conventions: class ids run 1..K and map to probability columns 0..K-1; the
no-object label occupies the last column. Contrastive denominators range
over the *other matched* student regions only, excluding the positive pair,
so both contrastive losses are unbounded below by construction and need at
least two matched regions (fewer contributes 0 and logs a degeneracy event).
"""
from __future__ import annotations

import logging
from typing import TYPE_CHECKING

import numpy as np
import torch

from .config import LossWeights
from .data import SegmentSet
from .model import PredictionSet

if TYPE_CHECKING:  # matching imports the pairwise costs from this module
    from .matching import Assignment

logger = logging.getLogger("regionseg")

PROB_FLOOR = 1e-12
MASK_EPS = 1e-7
COS_EPS = 1e-12


def masks_tensor(segments: SegmentSet, like: torch.Tensor) -> torch.Tensor:
    """Stack segment masks as a float tensor matching ``like``'s dtype/device."""
    stack = np.stack([s.mask for s in segments]).astype(np.float64)
    return torch.as_tensor(stack, dtype=like.dtype, device=like.device)


# ---------------------------------------------------------------------------
# binary mask loss: focal + dice

def _focal_terms(pred: torch.Tensor, weights: LossWeights
                 ) -> tuple[torch.Tensor, torch.Tensor]:
    """Pointwise focal terms: contribution where target=1 and target=0."""
    p = pred.clamp(MASK_EPS, 1.0 - MASK_EPS)
    pos = -weights.focal_alpha * (1.0 - p) ** weights.focal_gamma * torch.log(p)
    neg = (-(1.0 - weights.focal_alpha) * p ** weights.focal_gamma
           * torch.log(1.0 - p))
    return pos, neg


def focal_loss(pred_mask: torch.Tensor, target_mask: torch.Tensor,
               weights: LossWeights) -> torch.Tensor:
    pos, neg = _focal_terms(pred_mask, weights)
    t = target_mask.to(pred_mask.dtype)
    return (pos * t + neg * (1.0 - t)).mean()


def dice_loss(pred_mask: torch.Tensor, target_mask: torch.Tensor,
              weights: LossWeights) -> torch.Tensor:
    t = target_mask.to(pred_mask.dtype)
    eps = weights.dice_loss_eps
    inter = (pred_mask * t).sum()
    return 1.0 - (2.0 * inter + eps) / (pred_mask.sum() + t.sum() + eps)


def mask_loss(pred_mask: torch.Tensor, target_mask: torch.Tensor,
              weights: LossWeights) -> torch.Tensor:
    """lambda_focal * focal(gamma=2) + lambda_dice * dice."""
    if pred_mask.shape != target_mask.shape:
        raise ValueError(f"mask shape mismatch: {tuple(pred_mask.shape)} vs "
                         f"{tuple(target_mask.shape)}")
    return (weights.lambda_focal * focal_loss(pred_mask, target_mask, weights)
            + weights.lambda_dice * dice_loss(pred_mask, target_mask, weights))


def pairwise_mask_costs(pred_masks: torch.Tensor, target_masks: torch.Tensor,
                        weights: LossWeights
                        ) -> tuple[torch.Tensor, torch.Tensor]:
    """Vectorized (N_pred x N_target) focal and dice loss matrices.

    Shares the pointwise formulas with :func:`focal_loss` / :func:`dice_loss`
    so matching costs stay in lockstep with the training losses.
    """
    n = pred_masks.shape[0]
    p = pred_masks.reshape(n, -1)
    t = target_masks.to(pred_masks.dtype).reshape(target_masks.shape[0], -1)
    pos, neg = _focal_terms(p, weights)
    npx = p.shape[1]
    focal = (pos @ t.T + neg @ (1.0 - t).T) / npx
    inter = p @ t.T
    eps = weights.dice_loss_eps
    dice = 1.0 - (2.0 * inter + eps) / (p.sum(dim=1, keepdim=True)
                                        + t.sum(dim=1) + eps)
    return focal, dice


# ---------------------------------------------------------------------------
# supervised set loss

def supervised_loss(preds: PredictionSet, gt: SegmentSet,
                    assignment: Assignment, weights: LossWeights
                    ) -> torch.Tensor:
    """Cross-entropy over all queries plus mask loss on matched pairs.

    Unmatched queries take the no-object label, down-weighted by
    ``no_object_weight``.
    """
    if len(gt) != assignment.num_targets:
        raise ValueError("assignment does not match the target count")
    probs = preds.class_probs
    total = probs.new_zeros(())
    gt_masks = masks_tensor(gt, preds.soft_masks)
    for i, seg in enumerate(gt):
        j = assignment.sigma[i]
        total = total - torch.log(probs[j, seg.class_id - 1].clamp_min(PROB_FLOOR))
        total = total + mask_loss(preds.soft_masks[j], gt_masks[i], weights)
    no_obj = preds.no_object_index
    for j in assignment.unmatched:
        total = total - weights.no_object_weight * torch.log(
            probs[j, no_obj].clamp_min(PROB_FLOOR))
    return total


# ---------------------------------------------------------------------------
# region mask contrastive

def dice_similarity(mask_a: torch.Tensor, mask_b: torch.Tensor) -> torch.Tensor:
    """Soft dice overlap 2|a.b| / (|a| + |b|), in [0, 1]."""
    if mask_a.shape != mask_b.shape:
        raise ValueError("mask shape mismatch")
    b = mask_b.to(mask_a.dtype)
    return 2.0 * (mask_a * b).sum() / (mask_a.sum() + b.sum() + MASK_EPS)


def _pairwise_dice(masks_a: torch.Tensor, masks_b: torch.Tensor) -> torch.Tensor:
    a = masks_a.reshape(masks_a.shape[0], -1)
    b = masks_b.to(masks_a.dtype).reshape(masks_b.shape[0], -1)
    inter = a @ b.T
    return 2.0 * inter / (a.sum(dim=1, keepdim=True) + b.sum(dim=1) + MASK_EPS)


def _excluded_positive_contrast(sim: torch.Tensor, tau: float) -> torch.Tensor:
    """sum_i -log( exp(sim[i,i]/tau) / sum_{j != i} exp(sim[j,i]/tau) ).

    ``sim[a, i]`` is the similarity of matched student region ``a`` against
    target ``i``; the positive sits on the diagonal and is excluded from the
    denominator.
    """
    m = sim.shape[0]
    logits = sim / tau
    off_diag = ~torch.eye(m, dtype=torch.bool, device=sim.device)
    total = sim.new_zeros(())
    for i in range(m):
        denom = torch.logsumexp(logits[off_diag[:, i], i], dim=0)
        total = total + denom - logits[i, i]
    return total


def rmc_loss(student_masks: torch.Tensor, pseudo: SegmentSet,
             assignment: Assignment, weights: LossWeights) -> torch.Tensor:
    """Contrast mask overlaps of matched pairs against the other matched masks."""
    if len(pseudo) < 2:
        logger.debug("degenerate contrastive batch: %d pseudo region(s), "
                     "rmc contributes 0", len(pseudo))
        return student_masks.new_zeros(())
    target = masks_tensor(pseudo, student_masks)
    matched = student_masks[torch.as_tensor(assignment.sigma,
                                            device=student_masks.device)]
    sim = _pairwise_dice(matched, target)  # sim[a, i], positive at a == i
    return _excluded_positive_contrast(sim, weights.tau_m)


# ---------------------------------------------------------------------------
# region feature pooling and contrastive

class RegionFeature:
    """Mask-pooled feature vector tagged with its source region index."""

    __slots__ = ("vector", "index")

    def __init__(self, vector: torch.Tensor, index: int = -1):
        self.vector = vector
        self.index = index


def region_pool(mask: torch.Tensor, features: torch.Tensor,
                weights: LossWeights | None = None, index: int = -1
                ) -> RegionFeature:
    """Pool per-pixel features under a mask.

    The full-resolution mask is area-averaged down to the feature grid.
    ``pool_mode == 'map'`` divides by the mask mass (mask average pooling);
    ``'gap'`` divides by the number of positions (plain global average of
    the masked feature map).
    """
    w = weights or LossWeights()
    c, fh, fw = features.shape
    m = mask.to(features.dtype)
    if m.shape != (fh, fw):
        if m.shape[0] % fh or m.shape[1] % fw:
            raise ValueError("mask resolution must be a multiple of the "
                             "feature resolution")
        ky, kx = m.shape[0] // fh, m.shape[1] // fw
        m = m.reshape(fh, ky, fw, kx).mean(dim=(1, 3))
    weighted = (features * m).sum(dim=(1, 2))
    mass = m.sum()
    if float(mass.detach()) == 0.0:
        logger.debug("degenerate region: all-zero mask in region_pool")
    if w.pool_mode == "gap":
        return RegionFeature(weighted / (fh * fw), index)
    return RegionFeature(weighted / (mass + w.pool_eps), index)


def cosine_similarity_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    an = a / a.norm(dim=1, keepdim=True).clamp_min(COS_EPS)
    bn = b / b.norm(dim=1, keepdim=True).clamp_min(COS_EPS)
    return an @ bn.T


def rfc_loss(student_regions: list[RegionFeature],
             target_regions: list[RegionFeature],
             weights: LossWeights) -> torch.Tensor:
    """Contrast cosine similarities of matched region features.

    Target region vectors are treated as constants (stop-gradient), matching
    their role as pooled pseudo-label regions.
    """
    if len(student_regions) != len(target_regions):
        raise ValueError("student and target region counts must match")
    if len(student_regions) < 2:
        logger.debug("degenerate contrastive batch: %d region pair(s), "
                     "rfc contributes 0", len(student_regions))
        if student_regions:
            return student_regions[0].vector.new_zeros(())
        return torch.zeros(())
    s = torch.stack([r.vector for r in student_regions])
    t = torch.stack([r.vector for r in target_regions]).detach()
    sim = cosine_similarity_matrix(s, t)  # sim[a, i], positive at a == i
    return _excluded_positive_contrast(sim, weights.tau_f)


def pooled_region_features(preds: PredictionSet, pseudo: SegmentSet,
                           assignment: Assignment, weights: LossWeights
                           ) -> tuple[list[RegionFeature], list[RegionFeature]]:
    """Student and target region features for every matched pair.

    Both sides pool the *student's* pixel features; targets use the pseudo
    masks and are detached inside :func:`rfc_loss`.
    """
    student, target = [], []
    for i, seg in enumerate(pseudo):
        j = int(assignment.sigma[i])
        student.append(region_pool(preds.soft_masks[j], preds.pixel_features,
                                   weights, index=j))
        mask = torch.as_tensor(seg.mask, device=preds.pixel_features.device,
                               dtype=preds.pixel_features.dtype)
        target.append(region_pool(mask, preds.pixel_features, weights, index=i))
    return student, target


# ---------------------------------------------------------------------------
# region-level consistency

def rcc_loss(class_probs: torch.Tensor, pseudo: SegmentSet,
             assignment: Assignment) -> torch.Tensor:
    """Cross-entropy of matched student class distributions vs pseudo classes."""
    total = class_probs.new_zeros(())
    for i, seg in enumerate(pseudo):
        j = assignment.sigma[i]
        total = total - torch.log(
            class_probs[j, seg.class_id - 1].clamp_min(PROB_FLOOR))
    return total


def class_union(student_masks: torch.Tensor, class_probs: torch.Tensor,
                class_c: int, fallback_index: int) -> torch.Tensor:
    """Pixelwise max over student masks whose argmax class is ``class_c``.

    Falls back to the matched region's mask when no query currently predicts
    the class, keeping a gradient path alive.
    """
    predicted = class_probs.argmax(dim=1)
    selected = predicted == (class_c - 1)
    if bool(selected.any()):
        return student_masks[selected].max(dim=0).values
    return student_masks[fallback_index]


def smc_loss(preds: PredictionSet, pseudo: SegmentSet,
             assignment: Assignment, weights: LossWeights) -> torch.Tensor:
    """Mask loss between class-wise unions of student regions and pseudo masks.

    One term per distinct pseudo class: the union of the student regions
    predicted as that class against the union of the pseudo masks of that
    class.
    """
    total = preds.soft_masks.new_zeros(())
    pseudo_masks = masks_tensor(pseudo, preds.soft_masks)
    for c in sorted(set(pseudo.classes)):
        idx = [i for i, s in enumerate(pseudo) if s.class_id == c]
        target_union = pseudo_masks[idx].max(dim=0).values
        fallback = int(assignment.sigma[idx[0]])
        student_union = class_union(preds.soft_masks, preds.class_probs, c,
                                    fallback)
        total = total + mask_loss(student_union, target_union, weights)
    return total


# ---------------------------------------------------------------------------
# compositions

def unlabeled_loss(parts: tuple, weights: LossWeights):
    """beta-weighted sum of (RCC, SMC, RMC, RFC)."""
    rcc, smc, rmc, rfc = parts
    return (weights.beta1 * rcc + weights.beta2 * smc
            + weights.beta3 * rmc + weights.beta4 * rfc)


def total_loss(supervised, unlabeled, weights: LossWeights):
    """supervised + alpha * unlabeled."""
    return supervised + weights.alpha * unlabeled
