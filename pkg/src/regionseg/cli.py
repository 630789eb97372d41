"""Command-line surface: make-data / train / eval / ablate / plot."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import DatasetConfig, TrainConfig, apply_override
from .data import DataError, build_dataset, load_manifest
from .evaluation import miou, semantic_inference
from .model import CheckpointError, forward, load_checkpoint
from .trainer import (ABLATION_GRIDS, ablation, ablation_table,
                      load_split_samples, train)

logger = logging.getLogger("regionseg")

FRACTIONS = {"1/2": 0.5, "1/4": 0.25, "1/8": 0.125, "1/16": 0.0625}


def _base_config(args) -> TrainConfig:
    if getattr(args, "preset", None):
        if args.preset not in config_mod.PRESETS:
            raise ValueError(f"unknown preset {args.preset!r}; choose from "
                             f"{sorted(config_mod.PRESETS)}")
        cfg = config_mod.PRESETS[args.preset]()
    else:
        cfg = TrainConfig()
    if getattr(args, "config", None):
        cfg = config_mod.load_json(TrainConfig, args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        apply_override(cfg, key.strip(), value.strip())
    cfg.validate()
    return cfg


def _default_run_dir(cfg: TrainConfig) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    digest = hashlib.sha256(
        json.dumps(config_mod.to_dict(cfg), sort_keys=True).encode()
    ).hexdigest()[:8]
    return Path("runs") / f"{stamp}-{digest}"


def cmd_make_data(args) -> int:
    scene_overrides = {"height": args.height, "width": args.width,
                       "num_classes": args.classes}
    cfg = DatasetConfig(num_train=args.num_train, num_val=args.num_val,
                        seed=args.seed if args.seed is not None else 0)
    for key, value in scene_overrides.items():
        setattr(cfg.scene, key, value)
    if args.labeled_count is not None:
        cfg.labeled_count = args.labeled_count
    else:
        cfg.labeled_fraction = FRACTIONS[args.fraction]
    manifest = build_dataset(cfg, args.out, force=args.force)
    n = {s: len(manifest.ids(s)) for s in ("labeled", "unlabeled", "val")}
    print(f"wrote dataset to {args.out}: {n['labeled']} labeled, "
          f"{n['unlabeled']} unlabeled, {n['val']} validation samples")
    return 0


def cmd_train(args) -> int:
    cfg = _base_config(args)
    run_dir = Path(args.out) if args.out else _default_run_dir(cfg)
    report = train(cfg, args.data, run_dir)
    print(f"run dir: {run_dir}")
    print(f"final mIoU: {report.final_miou:.4f}")
    for key, value in sorted(report.loss_means.items()):
        print(f"mean {key}: {value:.6g}")
    return 0


def _aligned_table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.data)
    labeled, _, val = load_split_samples(manifest)
    samples = val if args.split == "val" else labeled
    if not samples:
        raise DataError(f"split {args.split!r} has no annotated samples")
    preds, gts = [], []
    for sample in samples:
        preds.append(semantic_inference(forward(sample.image, model)))
        gts.append(sample.segments.to_label_map())
    exclude = (1,) if args.exclude_background else ()
    mean, per_class = miou(preds, gts, manifest.num_classes, exclude)

    headers = ["class", "name", "iou"]
    rows = [[str(c + 1), manifest.class_names.get(c + 1, "?"),
             "n/a" if np.isnan(v) else f"{v:.4f}"]
            for c, v in enumerate(per_class)]
    table = _aligned_table(headers, rows) + f"mIoU  {mean:.4f}\n"
    print(table, end="")
    if args.out:
        prefix = Path(args.out)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        prefix.with_suffix(".txt").write_text(table)
        payload = {"miou": mean,
                   "per_class": {str(c + 1): None if np.isnan(v) else v
                                 for c, v in enumerate(per_class)},
                   "split": args.split, "num_images": len(samples)}
        prefix.with_suffix(".json").write_text(json.dumps(payload, indent=2) + "\n")
    return 0


def cmd_ablate(args) -> int:
    cfg = _base_config(args)
    names = list(ABLATION_GRIDS) if args.which == "all" else [args.which]
    out_root = Path(args.out) if args.out else _default_run_dir(cfg).with_suffix(".ablate")
    for name in names:
        grid = ABLATION_GRIDS[name]()
        rows = ablation(cfg, grid, args.data, out_root / name)
        print(f"== {name} ==")
        print(ablation_table(rows), end="")
    print(f"tables under {out_root}")
    return 0


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run = Path(args.run)
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    metrics = run / "metrics.tsv"
    wrote = []
    if metrics.exists():
        raw = np.genfromtxt(metrics, delimiter="\t", names=True,
                            usecols=range(9))
        fig, ax = plt.subplots(figsize=(8, 5))
        for column in ("loss_label", "loss_rcc", "loss_smc", "loss_rmc",
                       "loss_rfc", "loss_total"):
            ax.plot(raw["step"], raw[column], label=column, linewidth=1.0)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(fontsize=8)
        fig.tight_layout()
        curve_path = out / "loss_curves.png"
        fig.savefig(curve_path, dpi=120)
        plt.close(fig)
        wrote.append(curve_path)

        totals = np.atleast_1d(raw["loss_total"])
        summary = [f"steps\t{len(totals)}",
                   f"first_total\t{totals[0]:.6g}",
                   f"last_total\t{totals[-1]:.6g}",
                   f"mean_total\t{float(np.mean(totals)):.6g}"]
        report = run / "report.json"
        if report.exists():
            payload = json.loads(report.read_text())
            summary.append(f"final_miou\t{payload.get('final_miou')}")
        summary_path = out / "summary.txt"
        summary_path.write_text("\n".join(summary) + "\n")
        wrote.append(summary_path)

    for table in sorted(run.rglob("ablation.tsv")):
        lines = table.read_text().splitlines()
        header = lines[0].split("\t")
        body = [line.split("\t") for line in lines[1:]]
        labels = [row[0] for row in body]
        mious = [float(row[1]) for row in body]
        fig, ax = plt.subplots(figsize=(8, 4))
        ax.bar(range(len(labels)), mious, color="#4878cf")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
        ax.set_ylabel("mIoU")
        ax.set_title(table.parent.name)
        fig.tight_layout()
        bar_path = out / f"ablation_{table.parent.name}.png"
        fig.savefig(bar_path, dpi=120)
        plt.close(fig)
        wrote.append(bar_path)
        del header
    if not wrote:
        raise DataError(f"nothing to plot under {run}")
    for path in wrote:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regionseg",
        description="Semi-supervised region-level segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-train", type=int, default=512)
    p.add_argument("--num-val", type=int, default=64)
    p.add_argument("--fraction", choices=sorted(FRACTIONS), default="1/8")
    p.add_argument("--labeled-count", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="run directory")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--preset", default=None,
                   choices=sorted(config_mod.PRESETS), help="named config preset")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dotted config override, e.g. losses.beta2=0")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("val", "labeled"), default="val")
    p.add_argument("--out", default=None, help="report path prefix")
    p.add_argument("--exclude-background", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid")
    p.add_argument("--data", required=True)
    p.add_argument("--which", choices=sorted(ABLATION_GRIDS) + ["all"],
                   default="component")
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--preset", default=None, choices=sorted(config_mod.PRESETS))
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render loss curves and ablation tables")
    p.add_argument("--run", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, CheckpointError) as exc:
        print(f"error (data): {exc}", file=sys.stderr)
        return 3
    except (ValueError, KeyError) as exc:
        print(f"error (config): {exc}", file=sys.stderr)
        return 4
    except RuntimeError as exc:
        print(f"error (runtime): {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
