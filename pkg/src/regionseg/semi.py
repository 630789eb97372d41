"""Teacher-student plumbing: EMA updates, pseudo labels, unlabeled step."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from . import augment
from .config import EmaConfig, PseudoLabelConfig, TrainConfig
from .data import Segment, SegmentSet
from .matching import Assignment, build_cost_matrix, hungarian
from .model import PredictionSet, RegionModel, forward

logger = logging.getLogger("regionseg")


def ema_update(teacher: RegionModel, student: RegionModel,
               config: EmaConfig | None = None) -> RegionModel:
    """theta_t <- tau * theta_t + (1 - tau) * theta_s, elementwise.

    tau = 1 leaves the teacher untouched; tau = 0 copies the student exactly.
    """
    cfg = config or EmaConfig()
    cfg.validate()
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ValueError("teacher and student parameter sets differ")
    tau = cfg.decay
    with torch.no_grad():
        for name, tp in t_params.items():
            sp = s_params[name]
            if tp.shape != sp.shape:
                raise ValueError(f"parameter shape mismatch for {name}")
            if tau == 1.0:
                continue
            if tau == 0.0:
                tp.copy_(sp)
            else:
                tp.mul_(tau).add_(sp, alpha=1.0 - tau)
    return teacher


def generate_pseudo_labels(teacher_preds: PredictionSet,
                           config: PseudoLabelConfig | None = None
                           ) -> SegmentSet:
    """Harden confident teacher queries into (class, binary mask) segments.

    Queries whose argmax is the no-object label, whose confidence falls below
    the threshold, or whose binarized mask is smaller than the minimum area
    are dropped. The result carries no gradients.
    """
    cfg = config or PseudoLabelConfig()
    cfg.validate()
    probs = teacher_preds.class_probs.detach().cpu().numpy()
    masks = teacher_preds.soft_masks.detach().cpu().numpy()
    no_obj = teacher_preds.no_object_index
    segments: list[Segment] = []
    for i in range(teacher_preds.num_queries):
        col = int(np.argmax(probs[i]))
        if col == no_obj:
            continue
        conf = float(probs[i, col])
        if conf < cfg.confidence_threshold:
            continue
        mask = masks[i] >= cfg.mask_threshold
        if int(mask.sum()) < max(cfg.min_area, 1):
            continue
        segments.append(Segment(col + 1, mask, conf))
    return SegmentSet(segments)


def pseudo_statistics(pseudo: SegmentSet, num_classes: int
                      ) -> tuple[int, float, list[int]]:
    hist = [0] * num_classes
    confs = []
    for seg in pseudo:
        hist[seg.class_id - 1] += 1
        confs.append(seg.confidence if seg.confidence is not None else 0.0)
    mean_conf = float(np.mean(confs)) if confs else 0.0
    return len(pseudo), mean_conf, hist


@dataclass
class UnlabeledBundle:
    """Everything the four unlabeled losses need for one sample."""

    skip: bool
    student_preds: PredictionSet | None = None
    pseudo: SegmentSet | None = None
    assignment: Assignment | None = None
    pseudo_count: int = 0
    pseudo_conf: float = 0.0
    class_hist: list[int] = field(default_factory=list)
    weak_record: augment.TransformRecord | None = None
    strong_record: augment.TransformRecord | None = None


def unlabeled_step(image: np.ndarray, partner: np.ndarray,
                   student: RegionModel, teacher: RegionModel,
                   config: TrainConfig, seed: int,
                   partner_id: str | None = None) -> UnlabeledBundle:
    """Weak view -> teacher -> pseudo labels -> transport -> strong view ->
    student -> matching. Deterministic in (inputs, parameters, seed)."""
    rng = np.random.default_rng([int(seed), 0x0b5e])
    seed_a, seed_b, seed_s = (int(s) for s in rng.integers(0, 2**63, size=3))

    weak_a, rec_a = augment.weak_augment(image, seed_a, config.augment)
    weak_b, rec_b = augment.weak_augment(partner, seed_b, config.augment)

    teacher.eval()
    with torch.no_grad():
        pseudo_a = generate_pseudo_labels(forward(weak_a, teacher), config.pseudo)
        pseudo_b = generate_pseudo_labels(forward(weak_b, teacher), config.pseudo)

    strong, rec_s = augment.strong_augment(weak_a, weak_b, seed_s,
                                           config.augment, base_record=rec_a,
                                           partner_id=partner_id)
    pseudo = augment.transport_segments(pseudo_a, rec_a, rec_s,
                                        partner_segments=pseudo_b)
    n = config.arch.num_queries
    if len(pseudo) > n:  # CutMix can merge regions from two images past N
        order = sorted(range(len(pseudo)),
                       key=lambda i: (-(pseudo[i].confidence or 0.0), i))
        keep = sorted(order[:n])
        pseudo = SegmentSet([pseudo[i] for i in keep])
    count, conf, hist = pseudo_statistics(pseudo, config.arch.num_classes)
    if len(pseudo) == 0:
        logger.debug("empty pseudo set; unlabeled losses skipped for sample")
        return UnlabeledBundle(skip=True, weak_record=rec_a,
                               strong_record=rec_s, class_hist=hist)

    student_preds = forward(strong, student)
    assignment = hungarian(build_cost_matrix(student_preds, pseudo,
                                             config.losses))
    return UnlabeledBundle(skip=False, student_preds=student_preds,
                           pseudo=pseudo, assignment=assignment,
                           pseudo_count=count, pseudo_conf=conf,
                           class_hist=hist, weak_record=rec_a,
                           strong_record=rec_s)
