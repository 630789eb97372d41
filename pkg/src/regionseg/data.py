"""Synthetic shapes dataset: generation, splits and on-disk persistence.

Scenes are built from a flat-colored background (class 1) plus a handful of
colored shapes whose *geometry* carries the class: circles (class 2),
rectangles (class 3), triangles (class 4); further classes cycle through the
same three shape types. Colors are drawn independently of the class so that
color is a nuisance variable and the class signal is the shape outline.

On-disk layout (all formats are plain text or binary PPM, no external
format dependencies)::

    <root>/
      manifest.txt           one line per sample: id<TAB>split<TAB>checksum,
                             preceded by '#'-prefixed header lines carrying
                             the generation seed, class table and image size
      images/<id>.ppm        binary P6 portable pixmap, 8-bit RGB
      masks/<id>/<k>.rle     one segment per file; line-oriented:
                               class <TAB> <class_id>
                               size  <TAB> <H> <TAB> <W>
                               conf  <TAB> <float>        (optional)
                               runs  <TAB> <r0> <r1> ...
                             runs are alternating zero/one run lengths over
                             the row-major flattened mask, starting with the
                             number of leading zeros.

Unlabeled samples store no mask files. The per-sample checksum is the
SHA-256 of the image file bytes, updated with every mask file's bytes in
ascending segment order. Generation is a pure function of (seed, config):
sample ``i`` derives its own random stream from ``(seed, i)``, so samples
could be produced in any order (or in parallel) with identical results.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import DatasetConfig, SceneConfig
from .validation import check_image


class DataError(Exception):
    pass


class ChecksumError(DataError):
    pass


# ---------------------------------------------------------------------------
# segments

@dataclass
class Segment:
    """A (class, binary mask) region; confidence is set on pseudo labels."""

    class_id: int
    mask: np.ndarray  # bool, H x W
    confidence: float | None = None


@dataclass
class SegmentSet:
    """A set of segments over one image frame."""

    segments: list[Segment] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)

    def __getitem__(self, i: int) -> Segment:
        return self.segments[i]

    @property
    def classes(self) -> list[int]:
        return [s.class_id for s in self.segments]

    def validate(self, shape: tuple[int, int] | None = None) -> None:
        for s in self.segments:
            if s.mask.dtype != bool or s.mask.ndim != 2:
                raise ValueError("segment masks must be 2-D boolean arrays")
            if shape is not None and s.mask.shape != tuple(shape):
                raise ValueError("segment mask shape mismatch")
            if not s.mask.any():
                raise ValueError("segment mask must contain at least one pixel")
            if s.class_id < 1:
                raise ValueError("segment class ids must be >= 1")

    def to_label_map(self) -> np.ndarray:
        """Paint segments into a per-pixel class map (later segments win)."""
        if not self.segments:
            raise ValueError("cannot build a label map from an empty segment set")
        h, w = self.segments[0].mask.shape
        out = np.zeros((h, w), dtype=np.int64)
        for s in self.segments:
            out[s.mask] = s.class_id
        if (out == 0).any():
            raise ValueError("segments do not cover the full pixel grid")
        return out


def label_map_to_segments(labels: np.ndarray) -> SegmentSet:
    """One segment per class id present; inverse of ``to_label_map`` for
    disjoint-cover maps up to instance splits."""
    segs = [Segment(int(c), labels == c) for c in np.unique(labels)]
    return SegmentSet(segs)


# ---------------------------------------------------------------------------
# scene generation

def _triangle_mask(h: int, w: int, cy: float, cx: float, size: float,
                   angle: float) -> np.ndarray:
    angles = angle + np.array([0.0, 2.0 * np.pi / 3.0, 4.0 * np.pi / 3.0])
    vy = cy + size * np.sin(angles)
    vx = cx + size * np.cos(angles)
    yy, xx = np.mgrid[0:h, 0:w]
    mask = np.ones((h, w), dtype=bool)
    for i in range(3):
        y0, x0 = vy[i], vx[i]
        y1, x1 = vy[(i + 1) % 3], vx[(i + 1) % 3]
        # keep the side of each edge that contains the third vertex
        y2, x2 = vy[(i + 2) % 3], vx[(i + 2) % 3]
        cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
        ref = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        mask &= (cross * ref) >= 0
    return mask


def _shape_mask(rng: np.random.Generator, kind: int, cfg: SceneConfig) -> np.ndarray:
    h, w = cfg.height, cfg.width
    size = rng.uniform(cfg.min_size, cfg.max_size)
    margin = size + 1.0
    cy = rng.uniform(margin, h - margin)
    cx = rng.uniform(margin, w - margin)
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == 0:  # circle
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= size ** 2
    if kind == 1:  # axis-aligned rectangle
        ry = rng.uniform(0.6, 1.0) * size
        rx = rng.uniform(0.6, 1.0) * size
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    return _triangle_mask(h, w, cy, cx, 1.3 * size, rng.uniform(0, 2 * np.pi))


def generate_scene(seed: int, scene_config: SceneConfig | None = None
                   ) -> tuple[np.ndarray, SegmentSet]:
    """Render one synthetic scene; same seed gives bit-identical output.

    Returns the image as float32 (3, H, W) quantized to 8-bit levels, plus
    the exact ground-truth segments (pairwise disjoint, covering every pixel,
    background included as class 1).
    """
    cfg = scene_config or SceneConfig()
    cfg.validate()
    rng = np.random.default_rng([int(seed), 0x5ce9e])
    h, w = cfg.height, cfg.width

    bg_color = rng.uniform(0.05, 0.30) + rng.uniform(-0.03, 0.03, size=3)
    image = np.broadcast_to(np.clip(bg_color, 0, 1)[:, None, None],
                            (3, h, w)).astype(np.float64).copy()
    owner = np.full((h, w), -1, dtype=np.int64)  # topmost shape index, -1 = bg

    n_shapes = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    shape_classes: list[int] = []
    for k in range(n_shapes):
        class_id = int(rng.integers(2, cfg.num_classes + 1))
        kind = (class_id - 2) % 3
        mask = _shape_mask(rng, kind, cfg)
        # class-correlated color: one dominant channel per class, with enough
        # spread that color jitter genuinely perturbs the class evidence
        color = rng.uniform(0.10, 0.55, size=3)
        color[kind] = rng.uniform(0.60, 0.95)
        image[:, mask] = color[:, None]
        owner[mask] = k
        shape_classes.append(class_id)

    if cfg.noise_sigma > 0:
        image = image + rng.normal(0.0, cfg.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    image = (np.round(image * 255.0) / 255.0).astype(np.float32)

    segments = [Segment(1, owner == -1)]
    for k, class_id in enumerate(shape_classes):
        visible = owner == k
        if visible.any():  # fully occluded shapes are dropped
            segments.append(Segment(class_id, visible))
    segset = SegmentSet(segments)
    segset.validate((h, w))
    return image, segset


# ---------------------------------------------------------------------------
# PPM and RLE codecs

def save_ppm(path: Path, image: np.ndarray) -> bytes:
    check_image(image)
    h, w = image.shape[1], image.shape[2]
    data = (np.round(np.asarray(image, dtype=np.float64) * 255.0)
            .astype(np.uint8).transpose(1, 2, 0).tobytes())
    payload = f"P6\n{w} {h}\n255\n".encode("ascii") + data
    path.write_bytes(payload)
    return payload


def load_ppm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if not raw.startswith(b"P6"):
        raise DataError(f"{path}: not a binary PPM file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(raw, dtype=np.uint8, count=h * w * 3, offset=pos)
    if data.size != h * w * 3:
        raise DataError(f"{path}: truncated pixel data")
    return (data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0)


def rle_encode(mask: np.ndarray) -> list[int]:
    """Alternating zero/one run lengths over the row-major mask, starting
    with the count of leading zeros (possibly 0)."""
    flat = np.asarray(mask, dtype=np.uint8).ravel()
    if flat.size == 0:
        return []
    runs: list[int] = []
    value = 0
    boundaries = np.flatnonzero(np.diff(flat)) + 1
    edges = np.concatenate(([0], boundaries, [flat.size]))
    for start, stop in zip(edges[:-1], edges[1:]):
        run_value = int(flat[start])
        if run_value != value:
            runs.append(0)
            value = run_value
        runs.append(int(stop - start))
        value = 1 - value
    return runs


def rle_decode(runs: list[int], shape: tuple[int, int]) -> np.ndarray:
    total = int(np.prod(shape))
    flat = np.zeros(total, dtype=bool)
    pos = 0
    value = False
    for run in runs:
        if run < 0 or pos + run > total:
            raise DataError("corrupt run-length data")
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    if pos != total:
        raise DataError("run-length data does not cover the mask")
    return flat.reshape(shape)


def save_segment_rle(path: Path, segment: Segment) -> bytes:
    h, w = segment.mask.shape
    lines = [f"class\t{segment.class_id}", f"size\t{h}\t{w}"]
    if segment.confidence is not None:
        lines.append(f"conf\t{segment.confidence:.8g}")
    lines.append("runs\t" + " ".join(str(r) for r in rle_encode(segment.mask)))
    payload = ("\n".join(lines) + "\n").encode("ascii")
    path.write_bytes(payload)
    return payload


def load_segment_rle(path: Path) -> Segment:
    fields: dict[str, list[str]] = {}
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split("\t")
        fields[parts[0]] = parts[1:]
    try:
        class_id = int(fields["class"][0])
        h, w = int(fields["size"][0]), int(fields["size"][1])
        runs = [int(r) for r in fields["runs"][0].split()] if fields["runs"][0] else []
    except (KeyError, IndexError, ValueError) as exc:
        raise DataError(f"{path}: malformed segment file") from exc
    conf = float(fields["conf"][0]) if "conf" in fields else None
    return Segment(class_id, rle_decode(runs, (h, w)), conf)


# ---------------------------------------------------------------------------
# manifest and dataset build

SPLITS = ("labeled", "unlabeled", "val")


@dataclass
class DatasetManifest:
    root: Path
    seed: int
    num_classes: int
    class_names: dict[int, str]
    height: int
    width: int
    splits: dict[str, str]        # id -> split
    checksums: dict[str, str]     # id -> sha256 hex

    def ids(self, split: str) -> list[str]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [i for i, s in self.splits.items() if s == split]


def class_name_table(num_classes: int) -> dict[int, str]:
    kinds = ("circle", "rectangle", "triangle")
    names = {1: "background"}
    for c in range(2, num_classes + 1):
        base = kinds[(c - 2) % 3]
        suffix = "" if c - 2 < 3 else f"-{(c - 2) // 3 + 1}"
        names[c] = base + suffix
    return names


def save_manifest(manifest: DatasetManifest) -> None:
    lines = ["# regionseg dataset manifest v1",
             f"# seed\t{manifest.seed}",
             f"# classes\t{manifest.num_classes}",
             f"# height\t{manifest.height}",
             f"# width\t{manifest.width}"]
    for c in sorted(manifest.class_names):
        lines.append(f"# class\t{c}\t{manifest.class_names[c]}")
    for sample_id in sorted(manifest.splits):
        lines.append(f"{sample_id}\t{manifest.splits[sample_id]}\t"
                     f"{manifest.checksums[sample_id]}")
    (manifest.root / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_manifest(root: str | Path) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.txt"
    if not path.exists():
        raise DataError(f"no manifest at {path}")
    header: dict[str, list[list[str]]] = {}
    splits: dict[str, str] = {}
    checksums: dict[str, str] = {}
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            parts = line[1:].strip().split("\t")
            header.setdefault(parts[0], []).append(parts[1:])
            continue
        sample_id, split, checksum = line.split("\t")
        if split not in SPLITS:
            raise DataError(f"manifest lists unknown split {split!r}")
        splits[sample_id] = split
        checksums[sample_id] = checksum
    try:
        seed = int(header["seed"][0][0])
        num_classes = int(header["classes"][0][0])
        height = int(header["height"][0][0])
        width = int(header["width"][0][0])
        class_names = {int(row[0]): row[1] for row in header.get("class", [])}
    except (KeyError, IndexError, ValueError) as exc:
        raise DataError(f"{path}: malformed manifest header") from exc
    return DatasetManifest(root, seed, num_classes, class_names,
                           height, width, splits, checksums)


def _sample_seed(dataset_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([dataset_seed, index]).generate_state(1)[0])


def build_dataset(dataset_config: DatasetConfig, root: str | Path,
                  force: bool = False) -> DatasetManifest:
    """Generate all samples, write them under ``root`` and return the manifest.

    Refuses to overwrite an existing manifest unless ``force`` is set. Two
    calls with the same config produce byte-identical trees.
    """
    cfg = dataset_config
    cfg.validate()
    root = Path(root)
    if (root / "manifest.txt").exists() and not force:
        raise DataError(f"{root} already contains a dataset; pass force=True "
                        "to overwrite")
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)

    n_labeled = cfg.resolved_labeled_count()
    split_rng = np.random.default_rng([cfg.seed, 0x5b117])
    order = split_rng.permutation(cfg.num_train)
    labeled_ids = {int(i) for i in order[:n_labeled]}

    splits: dict[str, str] = {}
    checksums: dict[str, str] = {}
    total = cfg.num_train + cfg.num_val
    for index in range(total):
        sample_id = f"s{index:04d}"
        if index >= cfg.num_train:
            split = "val"
        else:
            split = "labeled" if index in labeled_ids else "unlabeled"
        image, segments = generate_scene(_sample_seed(cfg.seed, index), cfg.scene)
        digest = hashlib.sha256()
        digest.update(save_ppm(root / "images" / f"{sample_id}.ppm", image))
        if split != "unlabeled":
            mask_dir = root / "masks" / sample_id
            mask_dir.mkdir(parents=True, exist_ok=True)
            for k, seg in enumerate(segments):
                digest.update(save_segment_rle(mask_dir / f"{k}.rle", seg))
        splits[sample_id] = split
        checksums[sample_id] = digest.hexdigest()

    manifest = DatasetManifest(root, cfg.seed, cfg.scene.num_classes,
                               class_name_table(cfg.scene.num_classes),
                               cfg.scene.height, cfg.scene.width,
                               splits, checksums)
    save_manifest(manifest)
    return manifest


def load_sample(manifest: DatasetManifest, sample_id: str
                ) -> tuple[np.ndarray, SegmentSet | None]:
    """Load one sample; unlabeled samples come back without segments."""
    if sample_id not in manifest.splits:
        raise DataError(f"unknown sample id {sample_id!r}")
    image_path = manifest.root / "images" / f"{sample_id}.ppm"
    if not image_path.exists():
        raise DataError(f"missing image file {image_path}")
    digest = hashlib.sha256()
    digest.update(image_path.read_bytes())
    image = load_ppm(image_path)

    segments: SegmentSet | None = None
    if manifest.splits[sample_id] != "unlabeled":
        mask_dir = manifest.root / "masks" / sample_id
        if not mask_dir.exists():
            raise DataError(f"missing mask directory {mask_dir}")
        segs = []
        for k in sorted(int(p.stem) for p in mask_dir.glob("*.rle")):
            path = mask_dir / f"{k}.rle"
            digest.update(path.read_bytes())
            segs.append(load_segment_rle(path))
        segments = SegmentSet(segs)
        segments.validate((manifest.height, manifest.width))

    if digest.hexdigest() != manifest.checksums[sample_id]:
        raise ChecksumError(f"checksum mismatch for sample {sample_id!r}")
    return image, segments


def ingest_folder(images_dir: str | Path, masks_dir: str | Path,
                  root: str | Path, val_ids: set[str] | None = None,
                  seed: int = 0, force: bool = False) -> DatasetManifest:
    """Adapter for pre-existing folder data in the same PPM/RLE formats.

    ``images_dir`` holds ``<id>.ppm`` files; ``masks_dir`` holds one
    ``<id>/<k>.rle`` directory per annotated sample. Samples without a mask
    directory become the unlabeled split; ``val_ids`` selects validation
    samples among the annotated ones. Files are copied under ``root`` and a
    manifest is written. This is intentionally minimal: it does not convert
    foreign image or annotation formats.
    """
    images_dir, masks_dir, root = Path(images_dir), Path(masks_dir), Path(root)
    root_images = root / "images"
    root_masks = root / "masks"
    if (root / "manifest.txt").exists() and not force:
        raise DataError(f"{root} already contains a dataset")
    root_images.mkdir(parents=True, exist_ok=True)
    root_masks.mkdir(parents=True, exist_ok=True)

    splits: dict[str, str] = {}
    checksums: dict[str, str] = {}
    height = width = None
    max_class = 1
    for image_path in sorted(images_dir.glob("*.ppm")):
        sample_id = image_path.stem
        image = load_ppm(image_path)
        height, width = image.shape[1], image.shape[2]
        digest = hashlib.sha256()
        payload = image_path.read_bytes()
        (root_images / image_path.name).write_bytes(payload)
        digest.update(payload)
        mask_dir = masks_dir / sample_id
        if mask_dir.is_dir():
            out_dir = root_masks / sample_id
            out_dir.mkdir(parents=True, exist_ok=True)
            for k in sorted(int(p.stem) for p in mask_dir.glob("*.rle")):
                seg_bytes = (mask_dir / f"{k}.rle").read_bytes()
                (out_dir / f"{k}.rle").write_bytes(seg_bytes)
                digest.update(seg_bytes)
                max_class = max(max_class, load_segment_rle(mask_dir / f"{k}.rle").class_id)
            splits[sample_id] = "val" if val_ids and sample_id in val_ids else "labeled"
        else:
            splits[sample_id] = "unlabeled"
        checksums[sample_id] = digest.hexdigest()
    if height is None:
        raise DataError(f"no .ppm images found under {images_dir}")

    manifest = DatasetManifest(root, seed, max_class, class_name_table(max_class),
                               height, width, splits, checksums)
    save_manifest(manifest)
    return manifest
