"""Weak/strong augmentation with replayable records and segment transport.

A :class:`TransformRecord` fully determines the map from source-image pixels
to output pixels (nearest-neighbor resize, crop, horizontal flip) plus the
photometric jitter and an optional CutMix patch. Records of two views of the
same source image let pseudo segments produced in one view be transported
into the other.

The strong view deliberately reuses the weak view's geometry (pass the weak
record as ``base_record``) and only adds CutMix and a wider jitter, so the
geometric difference between the two views is the identity and transport
reduces to identity-plus-CutMix.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .config import AugmentConfig
from .data import Segment, SegmentSet


@dataclass(frozen=True)
class ColorJitter:
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0


@dataclass(frozen=True)
class CutMixPatch:
    box: tuple[int, int, int, int]      # y, x, h, w in the output frame
    partner_id: str | None = None


@dataclass(frozen=True)
class TransformRecord:
    source_hw: tuple[int, int]
    scale: float
    crop: tuple[int, int, int, int]     # y, x, h, w in the resized frame
    hflip: bool
    color: ColorJitter = ColorJitter()
    cutmix: CutMixPatch | None = None

    @property
    def out_hw(self) -> tuple[int, int]:
        return self.crop[2], self.crop[3]

    def resized_hw(self) -> tuple[int, int]:
        h, w = self.source_hw
        return int(round(h * self.scale)), int(round(w * self.scale))

    def geometry(self) -> tuple:
        return (self.source_hw, self.scale, self.crop, self.hflip)

    def pullback(self) -> tuple[float, float, float, float]:
        """Affine map from output pixel centers to source coordinates.

        Returns (ay, by, ax, bx) with y_src = ay*y_out + by and
        x_src = ax*x_out + bx (ax is negative under horizontal flip).
        """
        hs, ws = self.source_hw
        hr, wr = self.resized_hw()
        sy, sx = hr / hs, wr / ws
        cy, cx, ch, cw = self.crop
        ay = 1.0 / sy
        by = (cy + 0.5) / sy - 0.5
        if self.hflip:
            ax = -1.0 / sx
            bx = (cx + cw - 1 + 0.5) / sx - 0.5
        else:
            ax = 1.0 / sx
            bx = (cx + 0.5) / sx - 0.5
        return ay, by, ax, bx

    def to_text(self) -> str:
        parts = [f"source\t{self.source_hw[0]}\t{self.source_hw[1]}",
                 f"scale\t{self.scale:.8g}",
                 "crop\t" + "\t".join(str(v) for v in self.crop),
                 f"hflip\t{int(self.hflip)}",
                 f"color\t{self.color.brightness:.8g}\t{self.color.contrast:.8g}"
                 f"\t{self.color.saturation:.8g}"]
        if self.cutmix is not None:
            box = "\t".join(str(v) for v in self.cutmix.box)
            parts.append(f"cutmix\t{box}\t{self.cutmix.partner_id or '-'}")
        return "\n".join(parts) + "\n"


def identity_record(source_hw: tuple[int, int]) -> TransformRecord:
    h, w = source_hw
    return TransformRecord(source_hw=(h, w), scale=1.0, crop=(0, 0, h, w),
                           hflip=False)


def _index_maps(record: TransformRecord) -> tuple[np.ndarray, np.ndarray]:
    ay, by, ax, bx = record.pullback()
    hs, ws = record.source_hw
    oh, ow = record.out_hw
    yi = np.clip(np.rint(ay * np.arange(oh) + by).astype(np.int64), 0, hs - 1)
    xi = np.clip(np.rint(ax * np.arange(ow) + bx).astype(np.int64), 0, ws - 1)
    return yi, xi


def apply_geometry(image: np.ndarray, record: TransformRecord) -> np.ndarray:
    """Resample an array (channels-first image or 2-D mask) through a record."""
    yi, xi = _index_maps(record)
    if image.ndim == 2:
        return image[yi[:, None], xi[None, :]]
    return image[:, yi[:, None], xi[None, :]]


def apply_color(image: np.ndarray, jitter: ColorJitter) -> np.ndarray:
    # factor-1.0 stages are skipped so the identity configuration is exact
    out = image
    if jitter.brightness != 1.0:
        out = out * jitter.brightness
    if jitter.contrast != 1.0:
        mean = out.mean()
        out = mean + (out - mean) * jitter.contrast
    if jitter.saturation != 1.0:
        gray = out.mean(axis=0, keepdims=True)
        out = gray + (out - gray) * jitter.saturation
    if out is image:
        return image
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_record(image: np.ndarray, record: TransformRecord) -> np.ndarray:
    return apply_color(apply_geometry(image, record), record.color)


def _draw_jitter(rng: np.random.Generator, lo: float, hi: float) -> ColorJitter:
    b, c, s = rng.uniform(lo, hi, size=3)
    return ColorJitter(float(b), float(c), float(s))


def weak_augment(image: np.ndarray, seed: int,
                 config: AugmentConfig | None = None
                 ) -> tuple[np.ndarray, TransformRecord]:
    """Short-edge resize, random crop, random horizontal flip, color jitter."""
    cfg = config or AugmentConfig()
    cfg.validate()
    rng = np.random.default_rng([int(seed), 0xaec])
    hs, ws = image.shape[1], image.shape[2]
    ch, cw = cfg.crop_hw

    scale = float(rng.uniform(*cfg.scale_range))
    hr, wr = int(round(hs * scale)), int(round(ws * scale))
    if hr < ch or wr < cw:
        raise ValueError(f"crop {ch}x{cw} larger than resized image {hr}x{wr}")
    cy = int(rng.integers(0, hr - ch + 1))
    cx = int(rng.integers(0, wr - cw + 1))
    hflip = bool(rng.random() < cfg.hflip_prob)
    jitter = _draw_jitter(rng, *cfg.weak_jitter)

    record = TransformRecord(source_hw=(hs, ws), scale=scale,
                             crop=(cy, cx, ch, cw), hflip=hflip, color=jitter)
    return apply_record(image, record), record


def _draw_cutmix_box(rng: np.random.Generator, hw: tuple[int, int],
                     cfg: AugmentConfig) -> tuple[int, int, int, int]:
    h, w = hw
    ratio = rng.uniform(*cfg.cutmix_area)
    aspect = rng.uniform(*cfg.cutmix_aspect)
    bh = min(h, int(round(np.sqrt(ratio * h * w / aspect))))
    bw = min(w, int(round(np.sqrt(ratio * h * w * aspect))))
    y0 = int(rng.integers(0, h - bh + 1)) if bh < h else 0
    x0 = int(rng.integers(0, w - bw + 1)) if bw < w else 0
    return y0, x0, bh, bw


def strong_augment(image_a: np.ndarray, image_b: np.ndarray, seed: int,
                   config: AugmentConfig | None = None,
                   base_record: TransformRecord | None = None,
                   partner_id: str | None = None
                   ) -> tuple[np.ndarray, TransformRecord]:
    """CutMix ``image_b`` content into ``image_a`` plus stronger color jitter.

    Both inputs must already live in the same (weak) frame. The returned
    record keeps the geometry of ``base_record`` (the weak record of
    ``image_a``) so it stays expressed relative to the original source image.
    """
    cfg = config or AugmentConfig()
    cfg.validate()
    if image_a.shape != image_b.shape:
        raise ValueError("strong_augment inputs must share a frame")
    rng = np.random.default_rng([int(seed), 0x57e0])
    hw = (image_a.shape[1], image_a.shape[2])

    jitter = _draw_jitter(rng, *cfg.strong_jitter)
    box = _draw_cutmix_box(rng, hw, cfg)
    base = base_record or identity_record(hw)
    record = replace(base, color=jitter,
                     cutmix=CutMixPatch(box=box, partner_id=partner_id))

    out = apply_color(image_a, jitter).copy()
    y0, x0, bh, bw = box
    if bh > 0 and bw > 0:
        out[:, y0:y0 + bh, x0:x0 + bw] = image_b[:, y0:y0 + bh, x0:x0 + bw]
    return out, record


def _frame_transfer_maps(record_src: TransformRecord,
                         record_dst: TransformRecord
                         ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pixel source-frame indices for each destination pixel.

    Returns (yi, xi, valid); ``valid`` is False where the destination pixel
    falls outside the source frame.
    """
    if record_src.geometry() == record_dst.geometry():
        oh, ow = record_dst.out_hw
        yi = np.broadcast_to(np.arange(oh)[:, None], (oh, ow))
        xi = np.broadcast_to(np.arange(ow)[None, :], (oh, ow))
        return yi, xi, np.ones((oh, ow), dtype=bool)
    ayd, byd, axd, bxd = record_dst.pullback()
    ays, bys, axs, bxs = record_src.pullback()
    oh, ow = record_dst.out_hw
    sh, sw = record_src.out_hw
    # dst pixel -> source coords -> src-frame coords
    y_src = (ayd * np.arange(oh) + byd - bys) / ays
    x_src = (axd * np.arange(ow) + bxd - bxs) / axs
    yi = np.rint(y_src).astype(np.int64)
    xi = np.rint(x_src).astype(np.int64)
    valid = ((yi >= 0) & (yi < sh))[:, None] & ((xi >= 0) & (xi < sw))[None, :]
    yi = np.broadcast_to(np.clip(yi, 0, sh - 1)[:, None], (oh, ow))
    xi = np.broadcast_to(np.clip(xi, 0, sw - 1)[None, :], (oh, ow))
    return yi, xi, valid


def transport_segments(segments: SegmentSet, record_src: TransformRecord,
                       record_dst: TransformRecord,
                       partner_segments: SegmentSet | None = None
                       ) -> SegmentSet:
    """Carry segments from the source view's frame into the destination view.

    Masks are remapped through the geometric difference between the records;
    inside the destination's CutMix box the partner's segments take over.
    Segments whose transported mask comes out empty are dropped.
    """
    if record_dst.cutmix is not None and partner_segments is None:
        raise ValueError("destination record has a CutMix patch but no "
                         "partner segments were given")
    yi, xi, valid = _frame_transfer_maps(record_src, record_dst)
    oh, ow = record_dst.out_hw

    box_mask = np.zeros((oh, ow), dtype=bool)
    if record_dst.cutmix is not None:
        y0, x0, bh, bw = record_dst.cutmix.box
        box_mask[y0:y0 + bh, x0:x0 + bw] = True

    out: list[Segment] = []
    for seg in segments:
        mask = seg.mask[yi, xi] & valid & ~box_mask
        if mask.any():
            out.append(Segment(seg.class_id, mask, seg.confidence))
    if record_dst.cutmix is not None:
        for seg in partner_segments:  # partner already lives in the dst frame
            mask = seg.mask & box_mask
            if mask.any():
                out.append(Segment(seg.class_id, mask, seg.confidence))
    return SegmentSet(out)


def transform_ground_truth(segments: SegmentSet,
                           record: TransformRecord) -> SegmentSet:
    """Map ground-truth segments from source-image space into a view's frame."""
    src = identity_record(segments[0].mask.shape if len(segments) else record.source_hw)
    return transport_segments(segments, src, record)


def serialize_records(records: Iterable[TransformRecord]) -> str:
    return "\n".join(r.to_text() for r in records)
