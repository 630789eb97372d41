"""Cost matrix construction and optimal bipartite assignment.

Each target segment is assigned to a distinct prediction by minimizing
``cost(j, i) = -p_j(c_i) + lambda_focal * focal(m_j, m_i)
+ lambda_dice * dice_loss(m_j, m_i)``. The solve runs on a stop-gradient
copy of the predictions; gradients never flow through the discrete
assignment. Ties between equal-cost assignments are broken toward the
lowest prediction index, target by target, so matching is fully
deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .config import LossWeights
from .data import SegmentSet
from .model import PredictionSet
from .losses import masks_tensor, pairwise_mask_costs


@dataclass
class CostMatrix:
    """N predictions x M targets, with the component breakdown kept around."""

    costs: np.ndarray
    class_cost: np.ndarray
    focal_cost: np.ndarray
    dice_cost: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.costs.shape


@dataclass
class Assignment:
    """Injective map target index -> prediction index, plus the leftovers."""

    sigma: np.ndarray            # int array of length M
    unmatched: tuple[int, ...]   # prediction indices not in the matched set
    total_cost: float

    @property
    def matched(self) -> frozenset[int]:
        return frozenset(int(j) for j in self.sigma)

    @property
    def num_targets(self) -> int:
        return len(self.sigma)


def build_cost_matrix(preds: PredictionSet, targets: SegmentSet,
                      weights: LossWeights | None = None) -> CostMatrix:
    w = weights or LossWeights()
    if len(targets) == 0:
        raise ValueError("cannot match against an empty target set")
    for seg in targets:
        if not seg.mask.any():
            raise ValueError("target segments must have nonempty masks")
    with torch.no_grad():
        probs = preds.class_probs.detach().double()
        masks = preds.soft_masks.detach().double()
        target_masks = masks_tensor(targets, masks)
        cols = torch.as_tensor([s.class_id - 1 for s in targets],
                               device=probs.device)
        class_cost = (-probs[:, cols]).cpu().numpy()
        focal, dice = pairwise_mask_costs(masks, target_masks, w)
        focal_cost = focal.cpu().numpy()
        dice_cost = dice.cpu().numpy()
    costs = class_cost + w.lambda_focal * focal_cost + w.lambda_dice * dice_cost
    return CostMatrix(costs, class_cost, focal_cost, dice_cost)


def _canonical_total(costs: np.ndarray, sigma: np.ndarray) -> float:
    total = 0.0
    for i in range(len(sigma)):  # fixed target order keeps sums reproducible
        total += float(costs[sigma[i], i])
    return total


def _lowest_index_refinement(costs: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Among equal-cost assignments, prefer lower prediction indices.

    Repeatedly tries to move each target (in order) to a lower prediction
    index, either an unused prediction or by swapping with a later target,
    accepting only moves that keep the canonical total unchanged (or lower,
    which the optimal solve should already exclude).
    """
    n, m = costs.shape
    sigma = sigma.copy()
    base = _canonical_total(costs, sigma)
    changed = True
    guard = 0
    while changed and guard <= n * m:
        changed = False
        guard += 1
        holder = {int(sigma[k]): k for k in range(m)}
        for i in range(m):
            for j in range(int(sigma[i])):
                cand = sigma.copy()
                if j in holder:
                    k = holder[j]
                    if k < i:  # never worsen an earlier target's index
                        continue
                    cand[i], cand[k] = j, sigma[i]
                else:
                    cand[i] = j
                cand_total = _canonical_total(costs, cand)
                if cand_total <= base:
                    sigma = cand
                    base = cand_total
                    holder = {int(sigma[k]): k for k in range(m)}
                    changed = True
                    break
    return sigma


def hungarian(cost: CostMatrix | np.ndarray) -> Assignment:
    """Minimum-total-cost injective assignment of targets to predictions."""
    costs = cost.costs if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=np.float64)
    if costs.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    n, m = costs.shape
    if m > n:
        raise ValueError(f"more targets ({m}) than predictions ({n})")
    if not np.isfinite(costs).all():
        raise ValueError("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(costs)
    sigma = np.empty(m, dtype=np.int64)
    sigma[cols] = rows
    sigma = _lowest_index_refinement(costs, sigma)
    unmatched = tuple(j for j in range(n) if j not in set(int(v) for v in sigma))
    return Assignment(sigma, unmatched, _canonical_total(costs, sigma))


def match(preds: PredictionSet, targets: SegmentSet,
          weights: LossWeights | None = None) -> Assignment:
    return hungarian(build_cost_matrix(preds, targets, weights))


def debug_text(cost: CostMatrix, assignment: Assignment) -> str:
    """Structured-text dump of a cost matrix and its assignment."""
    lines = ["# cost matrix (rows = predictions, cols = targets)"]
    for j in range(cost.shape[0]):
        lines.append("\t".join(f"{cost.costs[j, i]:.6g}"
                               for i in range(cost.shape[1])))
    lines.append("# sigma (target -> prediction): "
                 + " ".join(f"{i}->{int(j)}" for i, j in enumerate(assignment.sigma)))
    lines.append(f"# unmatched predictions: {list(assignment.unmatched)}")
    lines.append(f"# total cost: {assignment.total_cost:.6g}")
    return "\n".join(lines) + "\n"
