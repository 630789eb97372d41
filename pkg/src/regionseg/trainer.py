"""Optimization loop: batch assembly, loss composition, AdamW with a poly
learning-rate schedule, EMA scheduling, checkpointing, evaluation and the
ablation harness.

Every source of randomness is keyed by (seed, step, purpose), never by a
shared stream, so disabling one branch (e.g. the unlabeled losses) leaves
every other draw unchanged and supervised-only runs are bit-identical to
alpha = 0 runs.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import augment, config as config_mod, losses, semi
from .config import TrainConfig, apply_overrides, to_dict
from .data import DatasetManifest, SegmentSet, load_manifest, load_sample
from .evaluation import miou, semantic_inference
from .matching import build_cost_matrix, debug_text, hungarian
from .model import RegionModel, clone_model, forward, init_params, save_checkpoint

logger = logging.getLogger("regionseg")

METRICS_COLUMNS = ("step", "lr", "loss_label", "loss_rcc", "loss_smc",
                   "loss_rmc", "loss_rfc", "loss_unlabeled", "loss_total",
                   "pseudo_count", "pseudo_conf", "pseudo_hist")


def poly_lr(base: float, iteration: int, max_iter: int, power: float) -> float:
    """base * (1 - iter/max_iter) ** power."""
    if iteration < 0 or iteration > max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return base * (1.0 - iteration / max_iter) ** power


@dataclass
class Sample:
    sample_id: str
    image: np.ndarray
    segments: SegmentSet | None


@dataclass
class RunReport:
    final_miou: float
    per_class_iou: list[float]
    metrics_path: Path | None
    checkpoint_paths: list[Path]
    wall_clock_s: float
    config: dict
    loss_means: dict[str, float] = field(default_factory=dict)
    student: RegionModel | None = None
    teacher: RegionModel | None = None


def load_split_samples(manifest: DatasetManifest | str | Path
                       ) -> tuple[list[Sample], list[Sample], list[Sample]]:
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    out = []
    for split in ("labeled", "unlabeled", "val"):
        samples = []
        for sid in sorted(manifest.ids(split)):
            image, segs = load_sample(manifest, sid)
            samples.append(Sample(sid, image, segs))
        out.append(samples)
    return out[0], out[1], out[2]


def _stream(seed: int, step: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, purpose])


def _format(value: float) -> str:
    return f"{value:.8g}"


def _check_finite(name: str, value: torch.Tensor) -> None:
    if not torch.isfinite(value).all():
        raise RuntimeError(f"non-finite loss component: {name} = {value}")


def _no_decay(name: str, param: torch.Tensor) -> bool:
    return param.dim() <= 1  # biases, norm scales, and other vectors


def build_optimizer(model: RegionModel, cfg: TrainConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (no_decay if _no_decay(name, p) else decay).append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)


def _supervised_batch(samples: list[Sample], cfg: TrainConfig,
                      student: RegionModel, step: int,
                      debug_dir: Path | None) -> torch.Tensor:
    rng = _stream(cfg.seed, step, 0)
    size = min(cfg.labeled_batch, len(samples))
    picks = rng.choice(len(samples), size=size, replace=False)
    total = None
    for order, idx in enumerate(picks):
        sample = samples[int(idx)]
        segs = sample.segments
        image = sample.image
        if cfg.augment_labeled:
            aug_seed = int(_stream(cfg.seed, step, 10 + order).integers(0, 2**63))
            image, record = augment.weak_augment(image, aug_seed, cfg.augment)
            segs = augment.transform_ground_truth(segs, record)
        preds = forward(image, student)
        cost = build_cost_matrix(preds, segs, cfg.losses)
        assignment = hungarian(cost)
        if debug_dir is not None:
            (debug_dir / f"step{step:06d}_{sample.sample_id}.txt").write_text(
                debug_text(cost, assignment))
        term = losses.supervised_loss(preds, segs, assignment, cfg.losses)
        total = term if total is None else total + term
    return total / size


def _unlabeled_batch(samples: list[Sample], cfg: TrainConfig,
                     student: RegionModel, teacher: RegionModel, step: int
                     ) -> tuple[list[torch.Tensor], int, float, list[int]]:
    """Mean RCC/SMC/RMC/RFC over the unlabeled sub-batch plus pseudo stats."""
    rng = _stream(cfg.seed, step, 1)
    size = min(cfg.unlabeled_batch, len(samples))
    picks = [int(i) for i in rng.choice(len(samples), size=size, replace=False)]
    zero = torch.zeros((), dtype=next(student.parameters()).dtype)
    parts = [None, None, None, None]
    count_total, conf_sum, conf_n = 0, 0.0, 0
    hist_total = [0] * cfg.arch.num_classes
    for order, idx in enumerate(picks):
        sample = samples[idx]
        partner = samples[picks[(order + 1) % len(picks)]]
        seed = int(_stream(cfg.seed, step, 20 + order).integers(0, 2**63))
        bundle = semi.unlabeled_step(sample.image, partner.image, student,
                                     teacher, cfg, seed,
                                     partner_id=partner.sample_id)
        count_total += bundle.pseudo_count
        if bundle.pseudo_count:
            conf_sum += bundle.pseudo_conf * bundle.pseudo_count
            conf_n += bundle.pseudo_count
        for c, v in enumerate(bundle.class_hist):
            hist_total[c] += v
        if bundle.skip:
            continue
        preds, pseudo, assign = (bundle.student_preds, bundle.pseudo,
                                 bundle.assignment)
        w = cfg.losses
        if cfg.enable_rcc and w.beta1 > 0:
            term = losses.rcc_loss(preds.class_probs, pseudo, assign)
            parts[0] = term if parts[0] is None else parts[0] + term
        if cfg.enable_smc and w.beta2 > 0:
            term = losses.smc_loss(preds, pseudo, assign, w)
            parts[1] = term if parts[1] is None else parts[1] + term
        if cfg.enable_rmc and w.beta3 > 0:
            term = losses.rmc_loss(preds.soft_masks, pseudo, assign, w)
            parts[2] = term if parts[2] is None else parts[2] + term
        if cfg.enable_rfc and w.beta4 > 0:
            student_regions, target_regions = losses.pooled_region_features(
                preds, pseudo, assign, w)
            term = losses.rfc_loss(student_regions, target_regions, w)
            parts[3] = term if parts[3] is None else parts[3] + term
    mean_conf = conf_sum / conf_n if conf_n else 0.0
    out = [zero if p is None else p / size for p in parts]
    return out, count_total, mean_conf, hist_total


def evaluate_model(model: RegionModel, samples: list[Sample],
                   num_classes: int, exclude: tuple[int, ...] = ()
                   ) -> tuple[float, list[float]]:
    model.eval()
    preds, gts = [], []
    with torch.no_grad():
        for sample in samples:
            preds.append(semantic_inference(forward(sample.image, model)))
            gts.append(sample.segments.to_label_map())
    return miou(preds, gts, num_classes, exclude)


def train(cfg: TrainConfig, manifest: DatasetManifest | str | Path,
          run_dir: str | Path | None = None) -> RunReport:
    """Run the full loop against an on-disk dataset."""
    labeled, unlabeled, val = load_split_samples(manifest)
    return train_on_samples(cfg, labeled, unlabeled, val, run_dir)


def train_on_samples(cfg: TrainConfig, labeled: list[Sample],
                     unlabeled: list[Sample], val: list[Sample],
                     run_dir: str | Path | None = None) -> RunReport:
    cfg.validate()
    if not labeled:
        raise ValueError("training needs at least one labeled sample")
    if cfg.deterministic:
        torch.set_num_threads(1)

    run_path = Path(run_dir) if run_dir is not None else None
    metrics_path = None
    metrics_file = None
    debug_dir = None
    if run_path is not None:
        run_path.mkdir(parents=True, exist_ok=True)
        config_mod.save_json(cfg, run_path / "config.json")
        metrics_path = run_path / "metrics.tsv"
        metrics_file = metrics_path.open("w")
        metrics_file.write("\t".join(METRICS_COLUMNS) + "\n")
        if cfg.debug_matching:
            debug_dir = run_path / "matching"
            debug_dir.mkdir(exist_ok=True)

    student = init_params(cfg.seed, cfg.arch)
    teacher = clone_model(student)  # exact copy at start
    optimizer = build_optimizer(student, cfg)
    use_unlabeled = cfg.unlabeled_enabled() and len(unlabeled) > 0

    start = time.monotonic()
    checkpoints: list[Path] = []
    sums = {k: 0.0 for k in ("loss_label", "loss_rcc", "loss_smc", "loss_rmc",
                             "loss_rfc", "loss_unlabeled", "loss_total")}
    try:
        for step in range(cfg.max_iters):
            lr = poly_lr(cfg.lr, step, cfg.max_iters, cfg.poly_power)
            for group in optimizer.param_groups:
                group["lr"] = lr

            student.train()
            sup = _supervised_batch(labeled, cfg, student, step, debug_dir)
            _check_finite("supervised", sup)

            zero = torch.zeros((), dtype=sup.dtype)
            parts = [zero, zero, zero, zero]
            count, conf, hist = 0, 0.0, [0] * cfg.arch.num_classes
            if use_unlabeled and step >= cfg.unlabeled_warmup:
                parts, count, conf, hist = _unlabeled_batch(
                    unlabeled, cfg, student, teacher, step)
                for name, value in zip(("rcc", "smc", "rmc", "rfc"), parts):
                    _check_finite(name, value)
                unl = losses.unlabeled_loss(tuple(parts), cfg.losses)
                total = losses.total_loss(sup, unl, cfg.losses)
            else:
                unl = zero
                total = sup
            _check_finite("total", total)

            optimizer.zero_grad(set_to_none=True)
            total.backward()
            if cfg.clip_grad_norm > 0:
                torch.nn.utils.clip_grad_norm_(student.parameters(),
                                               cfg.clip_grad_norm)
            optimizer.step()

            if step < cfg.ema_warmup:
                semi.ema_update(teacher, student,
                                config_mod.EmaConfig(decay=0.0, every=1))
            elif (step - cfg.ema_warmup) % cfg.ema.every == 0:
                semi.ema_update(teacher, student, cfg.ema)

            values = {"loss_label": sup.detach().item(),
                      "loss_rcc": parts[0].detach().item(),
                      "loss_smc": parts[1].detach().item(),
                      "loss_rmc": parts[2].detach().item(),
                      "loss_rfc": parts[3].detach().item(),
                      "loss_unlabeled": unl.detach().item(),
                      "loss_total": total.detach().item()}
            for key, v in values.items():
                sums[key] += v
            if metrics_file is not None and step % cfg.log_every == 0:
                row = [str(step), _format(lr)]
                row += [_format(values[k]) for k in METRICS_COLUMNS[2:9]]
                row += [str(count), _format(conf), ",".join(str(v) for v in hist)]
                metrics_file.write("\t".join(row) + "\n")

            if run_path is not None and cfg.checkpoint_every > 0 \
                    and (step + 1) % cfg.checkpoint_every == 0:
                path = run_path / f"checkpoint_{step + 1:06d}.npz"
                save_checkpoint(student, path)
                checkpoints.append(path)
    finally:
        if metrics_file is not None:
            metrics_file.close()

    if run_path is not None:
        for name, model_obj in (("student", student), ("teacher", teacher)):
            path = run_path / f"{name}_final.npz"
            save_checkpoint(model_obj, path)
            checkpoints.append(path)

    final_miou, per_class = float("nan"), []
    if val:
        eval_model = student if cfg.eval_model == "student" else teacher
        final_miou, per_class = evaluate_model(eval_model, val,
                                               cfg.arch.num_classes)
    wall = time.monotonic() - start
    loss_means = {k: v / cfg.max_iters for k, v in sums.items()}
    report = RunReport(final_miou, per_class, metrics_path, checkpoints, wall,
                       to_dict(cfg), loss_means, student=student,
                       teacher=teacher)
    if run_path is not None:
        summary = {"final_miou": final_miou, "per_class_iou": per_class,
                   "loss_means": loss_means, "wall_clock_s": wall}
        (run_path / "report.json").write_text(json.dumps(summary, indent=2) + "\n")
    return report


# ---------------------------------------------------------------------------
# ablation harness

@dataclass
class AblationRow:
    label: str
    overrides: dict[str, str]
    final_miou: float
    loss_means: dict[str, float]


def component_ablation_grid() -> list[dict]:
    """Cumulative component rows: none, +SMC, +RCC, +RMC, +RFC."""
    flags = ("enable_smc", "enable_rcc", "enable_rmc", "enable_rfc")
    rows = []
    for upto, label in enumerate(("none", "+smc", "+smc+rcc", "+smc+rcc+rmc",
                                  "+smc+rcc+rmc+rfc")):
        overrides = {flag: "true" if k < upto else "false"
                     for k, flag in enumerate(flags)}
        rows.append({"label": label, "overrides": overrides})
    return rows


def alpha_grid() -> list[dict]:
    return [{"label": f"alpha={a}", "overrides": {"losses.alpha": str(a)}}
            for a in (1.0, 1.5, 2.0)]


def query_count_grid() -> list[dict]:
    return [{"label": f"queries={n}",
             "overrides": {"arch.num_queries": str(n)}}
            for n in (16, 8, 4)]


def temperature_grid() -> list[dict]:
    rows = []
    for tm in (0.5, 1.0):
        for tfv in (0.5, 1.0):
            rows.append({"label": f"tau_m={tm},tau_f={tfv}",
                         "overrides": {"losses.tau_m": str(tm),
                                       "losses.tau_f": str(tfv)}})
    return rows


ABLATION_GRIDS = {
    "component": component_ablation_grid,
    "alpha": alpha_grid,
    "queries": query_count_grid,
    "temperature": temperature_grid,
}


def ablation(base_config: TrainConfig, grid: list[dict],
             manifest: DatasetManifest | str | Path,
             run_dir: str | Path | None = None) -> list[AblationRow]:
    """Run each override configuration with shared seeds and collect results."""
    labeled, unlabeled, val = load_split_samples(manifest)
    rows: list[AblationRow] = []
    for entry in grid:
        cfg = config_mod.from_dict(TrainConfig, to_dict(base_config))
        apply_overrides(cfg, entry["overrides"])
        sub_dir = None
        if run_dir is not None:
            safe = entry["label"].replace("/", "_").replace("=", "-").replace(",", "_")
            sub_dir = Path(run_dir) / safe
        report = train_on_samples(cfg, labeled, unlabeled, val, sub_dir)
        rows.append(AblationRow(entry["label"], dict(entry["overrides"]),
                                report.final_miou, report.loss_means))
        logger.info("ablation row %s: mIoU=%.4f", entry["label"],
                    report.final_miou)
    if run_dir is not None:
        (Path(run_dir) / "ablation.tsv").write_text(ablation_table(rows))
    return rows


def ablation_table(rows: list[AblationRow]) -> str:
    keys = ("loss_label", "loss_rcc", "loss_smc", "loss_rmc", "loss_rfc",
            "loss_total")
    header = ["config", "miou"] + [f"mean_{k}" for k in keys]
    lines = ["\t".join(header)]
    for row in rows:
        cells = [row.label, f"{row.final_miou:.4f}"]
        cells += [f"{row.loss_means[k]:.6g}" for k in keys]
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"
